#include "hair/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

namespace hair {

ConfigError::ConfigError(int line, std::string key, const std::string& message)
    : std::runtime_error((line > 0 ? "line " + std::to_string(line) + ": " : std::string{}) +
                         (key.empty() ? std::string{} : "key '" + key + "': ") + message),
      line_(line),
      key_(std::move(key)),
      detail_(message) {}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  return out;
}

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double to_double(const std::string& text) {
  const std::string t = trim(text);
  double v = 0.0;
  auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || res.ec != std::errc{} || res.ptr != t.data() + t.size() || !std::isfinite(v))
    throw std::invalid_argument("expected a number, got '" + text + "'");
  return v;
}

template <typename Int>
Int to_int(const std::string& text) {
  const std::string t = trim(text);
  Int v = 0;
  auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || res.ec != std::errc{} || res.ptr != t.data() + t.size())
    throw std::invalid_argument("expected an integer, got '" + text + "'");
  return v;
}

std::vector<int> to_int_list(const std::string& text) {
  std::string t = trim(text);
  if (t.size() >= 2 && t.front() == '[' && t.back() == ']') t = t.substr(1, t.size() - 2);
  if (trim(t).empty()) throw std::invalid_argument("expected a comma-separated integer list");
  std::vector<int> out;
  for (const auto& item : split(t, ',')) out.push_back(to_int<int>(item));
  return out;
}

std::string list_text(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

bool to_bool(const std::string& text) {
  const std::string t = trim(text);
  if (t == "true" || t == "1" || t == "yes") return true;
  if (t == "false" || t == "0" || t == "no") return false;
  throw std::invalid_argument("expected true or false, got '" + text + "'");
}

Profile to_profile(const std::string& text) {
  const std::string t = trim(text);
  if (t == "toy") return Profile::toy;
  if (t == "paper") return Profile::paper;
  throw std::invalid_argument("expected toy or paper, got '" + text + "'");
}

std::string tasks_text(const std::vector<TaskSpec>& tasks) {
  std::string out;
  for (std::size_t i = 0; i < tasks.size(); ++i) out += (i ? ";" : "") + tasks[i].serialize();
  return out;
}

bool integer_param(DegradationKind kind, const std::string& key) {
  return (kind == DegradationKind::rain && key == "count") || (kind == DegradationKind::blur && key == "length");
}

using Setter = std::function<void(RunConfig&, const std::string&)>;

const std::vector<std::pair<std::string, Setter>>& setters() {
  static const std::vector<std::pair<std::string, Setter>> table{
      {"profile", [](RunConfig& c, const std::string& v) { c.profile = to_profile(v); }},
      {"channels", [](RunConfig& c, const std::string& v) { c.channels = to_int<Index>(v); }},
      {"blocks", [](RunConfig& c, const std::string& v) { c.blocks = to_int_list(v); }},
      {"box_sizes", [](RunConfig& c, const std::string& v) { c.box_sizes = to_int_list(v); }},
      {"heads", [](RunConfig& c, const std::string& v) { c.heads = to_int_list(v); }},
      {"expansion", [](RunConfig& c, const std::string& v) { c.expansion = to_double(v); }},
      {"split", [](RunConfig& c, const std::string& v) { c.split = to_int<int>(v); }},
      {"hyper", [](RunConfig& c, const std::string& v) { c.hyper = to_bool(v); }},
      {"block_kind", [](RunConfig& c, const std::string& v) { c.block_kind = parse_block_kind(trim(v)); }},
      {"seed", [](RunConfig& c, const std::string& v) { c.seed = to_int<std::uint64_t>(v); }},
      {"steps", [](RunConfig& c, const std::string& v) { c.steps = to_int<std::int64_t>(v); }},
      {"epochs", [](RunConfig& c, const std::string& v) { c.epochs = to_int<std::int64_t>(v); }},
      {"batch", [](RunConfig& c, const std::string& v) { c.batch = to_int<int>(v); }},
      {"patch", [](RunConfig& c, const std::string& v) { c.patch = to_int<Index>(v); }},
      {"lr", [](RunConfig& c, const std::string& v) { c.lr = to_double(v); }},
      {"weight_decay", [](RunConfig& c, const std::string& v) { c.weight_decay = to_double(v); }},
      {"beta1", [](RunConfig& c, const std::string& v) { c.beta1 = to_double(v); }},
      {"beta2", [](RunConfig& c, const std::string& v) { c.beta2 = to_double(v); }},
      {"eps", [](RunConfig& c, const std::string& v) { c.eps = to_double(v); }},
      {"flips", [](RunConfig& c, const std::string& v) { c.flips = to_bool(v); }},
      {"eval_every", [](RunConfig& c, const std::string& v) { c.eval_every = to_int<std::int64_t>(v); }},
      {"log_every", [](RunConfig& c, const std::string& v) { c.log_every = to_int<std::int64_t>(v); }},
      {"tasks", [](RunConfig& c, const std::string& v) { c.tasks = parse_task_list(v); }},
      {"composites",
       [](RunConfig& c, const std::string& v) {
         c.composites = trim(v).empty() ? std::vector<TaskSpec>{} : parse_task_list(v);
       }},
      {"train_images", [](RunConfig& c, const std::string& v) { c.train_images = to_int<int>(v); }},
      {"val_images", [](RunConfig& c, const std::string& v) { c.val_images = to_int<int>(v); }},
      {"image_size", [](RunConfig& c, const std::string& v) { c.image_size = to_int<Index>(v); }},
      {"data_seed", [](RunConfig& c, const std::string& v) { c.data_seed = to_int<std::uint64_t>(v); }},
      {"clean_source", [](RunConfig& c, const std::string& v) { c.clean_source = trim(v); }},
      {"output_dir", [](RunConfig& c, const std::string& v) { c.output_dir = trim(v); }},
  };
  return table;
}

const Setter* find_setter(const std::string& key) {
  for (const auto& [name, fn] : setters()) {
    if (name == key) return &fn;
  }
  return nullptr;
}

void require(bool ok, const std::string& key, const std::string& message) {
  if (!ok) throw ConfigError(0, key, message);
}

}  // namespace

double ParamDist::sample(std::mt19937_64& rng) const {
  switch (mode) {
    case Mode::fixed:
      return values.at(0);
    case Mode::range:
      return std::uniform_real_distribution<double>(values.at(0), values.at(1))(rng);
    case Mode::choice:
      return values.at(std::uniform_int_distribution<std::size_t>(0, values.size() - 1)(rng));
  }
  return 0.0;
}

std::string ParamDist::serialize() const {
  switch (mode) {
    case Mode::fixed:
      return fmt(values.at(0));
    case Mode::range:
      return fmt(values.at(0)) + ".." + fmt(values.at(1));
    case Mode::choice: {
      std::string out;
      for (std::size_t i = 0; i < values.size(); ++i) out += (i ? "|" : "") + fmt(values[i]);
      return out;
    }
  }
  return {};
}

std::vector<DegradationSpec> TaskSpec::sample(std::mt19937_64& rng) const {
  std::vector<DegradationSpec> out;
  for (const auto& stage : stages) {
    DegradationSpec spec = make_spec(stage.kind);
    for (const auto& [key, dist] : stage.params) {
      double v = dist.sample(rng);
      if (integer_param(stage.kind, key)) v = std::round(v);
      spec.params[key] = v;
    }
    out.push_back(std::move(spec));
  }
  return out;
}

std::string TaskSpec::serialize() const {
  std::string out;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (i) out += '+';
    out += to_string(stages[i].kind);
    char sep = ':';
    for (const auto& [key, dist] : stages[i].params) {
      out += sep + key + "=" + dist.serialize();
      sep = ',';
    }
  }
  return out;
}

TaskSpec parse_task(const std::string& text) {
  TaskSpec task;
  if (trim(text).empty()) throw std::invalid_argument("empty task");
  for (const auto& stage_text : split(text, '+')) {
    StageDist stage;
    const auto colon = stage_text.find(':');
    stage.kind = parse_degradation_kind(trim(stage_text.substr(0, colon)));
    if (colon != std::string::npos) {
      for (const auto& item : split(stage_text.substr(colon + 1), ',')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("task parameter '" + item + "' lacks '='");
        const std::string key = trim(item.substr(0, eq));
        const std::string value = trim(item.substr(eq + 1));
        ParamDist dist;
        if (const auto dots = value.find(".."); dots != std::string::npos) {
          dist.mode = ParamDist::Mode::range;
          dist.values = {to_double(value.substr(0, dots)), to_double(value.substr(dots + 2))};
          if (dist.values[0] > dist.values[1]) throw std::invalid_argument("range '" + value + "' is reversed");
        } else if (value.find('|') != std::string::npos) {
          dist.mode = ParamDist::Mode::choice;
          for (const auto& opt : split(value, '|')) dist.values.push_back(to_double(opt));
        } else {
          dist.values = {to_double(value)};
        }
        // Every reachable value must be valid: check the extremes.
        for (double v : dist.values) {
          make_spec(stage.kind, {{key, integer_param(stage.kind, key) ? std::round(v) : v}}).validate();
        }
        stage.params[key] = dist;
      }
    }
    if (!task.label.empty()) task.label += '+';
    task.label += to_string(stage.kind);
    task.stages.push_back(std::move(stage));
  }
  return task;
}

std::vector<TaskSpec> parse_task_list(const std::string& text) {
  std::vector<TaskSpec> out;
  for (const auto& item : split(text, ';')) out.push_back(parse_task(item));
  return out;
}

std::string to_string(Profile profile) { return profile == Profile::toy ? "toy" : "paper"; }

RunConfig toy_profile() {
  RunConfig c;
  c.lr = 1e-3;
  c.tasks = parse_task_list("noise:sigma=25;haze");
  return c;
}

RunConfig paper_profile() {
  RunConfig c;
  c.profile = Profile::paper;
  c.channels = 48;
  c.blocks = {4, 6, 6, 8};
  c.box_sizes = {5, 7, 7, 9};
  c.heads = {1, 2, 4, 8};
  c.expansion = 2.66;
  c.split = 3;
  c.epochs = 160;
  c.batch = 32;
  c.patch = 128;
  c.image_size = 256;
  c.eval_every = 1000;
  c.tasks = parse_task_list("noise:sigma=15|25|50;rain;haze");
  return c;
}

ModelDesc RunConfig::model_desc() const {
  ModelDesc desc = restormer_desc(channels, blocks, heads, expansion, block_kind);
  if (hyper) desc = hyperize(std::move(desc), split, box_sizes);
  return desc;
}

std::int64_t RunConfig::steps_per_epoch() const { return (train_images + batch - 1) / batch; }

std::int64_t RunConfig::total_steps() const {
  return profile == Profile::toy ? steps : epochs * steps_per_epoch();
}

void RunConfig::validate() const {
  require(channels >= 1 && channels <= 512, "channels", "must lie in [1, 512]");
  const std::size_t levels = blocks.size();
  require(levels >= 2 && levels <= 6, "blocks", "must list between 2 and 6 levels");
  for (int b : blocks) require(b >= 1 && b <= 64, "blocks", "block counts must lie in [1, 64]");
  require(box_sizes.size() == levels, "box_sizes", "must list one size per level");
  for (int n : box_sizes) require(n >= 1 && n <= 64, "box_sizes", "sizes must lie in [1, 64]");
  require(heads.size() == levels, "heads", "must list one head count per level");
  for (std::size_t l = 0; l < levels; ++l) {
    const Index width = channels << l;
    require(heads[l] >= 1 && width % heads[l] == 0, "heads",
            "level " + std::to_string(l + 1) + " width " + std::to_string(width) + " is not divisible by " +
                std::to_string(heads[l]) + " heads");
  }
  require(expansion > 0.0 && expansion <= 16.0 && std::floor(expansion * channels) >= 1, "expansion",
          "must lie in (0, 16] and give a hidden width >= 1");
  if (hyper) {
    require(split >= 1 && split <= static_cast<int>(2 * levels - 2), "split",
            "must lie in [1, " + std::to_string(2 * levels - 2) + "]");
  }
  require(steps >= 0 && steps <= 100'000'000, "steps", "must lie in [0, 1e8]");
  require(epochs >= 1 && epochs <= 100'000, "epochs", "must lie in [1, 1e5]");
  require(batch >= 1 && batch <= 1024, "batch", "must lie in [1, 1024]");
  require(image_size >= 16 && image_size <= 4096, "image_size", "must lie in [16, 4096]");
  require(patch >= 16 && patch <= image_size, "patch", "must lie in [16, image_size]");
  require(lr >= 0.0 && lr <= 1.0, "lr", "must lie in [0, 1]");
  require(weight_decay >= 0.0 && weight_decay < 1.0, "weight_decay", "must lie in [0, 1)");
  require(beta1 >= 0.0 && beta1 < 1.0, "beta1", "must lie in [0, 1)");
  require(beta2 >= 0.0 && beta2 < 1.0, "beta2", "must lie in [0, 1)");
  require(eps > 0.0 && eps < 1.0, "eps", "must lie in (0, 1)");
  require(eval_every >= 0, "eval_every", "must be >= 0");
  require(log_every >= 1, "log_every", "must be >= 1");
  require(!tasks.empty(), "tasks", "at least one task is required");
  require(train_images >= 1 && train_images <= 1'000'000, "train_images", "must lie in [1, 1e6]");
  require(val_images >= 1 && val_images <= 1'000'000, "val_images", "must lie in [1, 1e6]");
  require(!clean_source.empty(), "clean_source", "must be 'procedural' or a directory");
  require(!output_dir.empty(), "output_dir", "must not be empty");
}

std::string RunConfig::serialize() const {
  std::ostringstream os;
  os << "profile = " << to_string(profile) << '\n'
     << "channels = " << channels << '\n'
     << "blocks = " << list_text(blocks) << '\n'
     << "box_sizes = " << list_text(box_sizes) << '\n'
     << "heads = " << list_text(heads) << '\n'
     << "expansion = " << fmt(expansion) << '\n'
     << "split = " << split << '\n'
     << "hyper = " << (hyper ? "true" : "false") << '\n'
     << "block_kind = " << to_string(block_kind) << '\n'
     << "seed = " << seed << '\n'
     << "steps = " << steps << '\n'
     << "epochs = " << epochs << '\n'
     << "batch = " << batch << '\n'
     << "patch = " << patch << '\n'
     << "lr = " << fmt(lr) << '\n'
     << "weight_decay = " << fmt(weight_decay) << '\n'
     << "beta1 = " << fmt(beta1) << '\n'
     << "beta2 = " << fmt(beta2) << '\n'
     << "eps = " << fmt(eps) << '\n'
     << "flips = " << (flips ? "true" : "false") << '\n'
     << "eval_every = " << eval_every << '\n'
     << "log_every = " << log_every << '\n'
     << "tasks = " << tasks_text(tasks) << '\n'
     << "composites = " << tasks_text(composites) << '\n'
     << "train_images = " << train_images << '\n'
     << "val_images = " << val_images << '\n'
     << "image_size = " << image_size << '\n'
     << "data_seed = " << data_seed << '\n'
     << "clean_source = " << clean_source << '\n'
     << "output_dir = " << output_dir << '\n';
  return os.str();
}

RunConfig parse_config(const std::string& text) {
  struct Entry {
    int line;
    std::string key, value;
  };
  std::vector<Entry> entries;
  std::istringstream is(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(is, raw)) {
    ++line_no;
    if (const auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    const std::string line = trim(raw);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(line_no, "", "expected 'key = value', got '" + line + "'");
    Entry e{line_no, trim(line.substr(0, eq)), trim(line.substr(eq + 1))};
    if (e.key.empty()) throw ConfigError(line_no, "", "missing key before '='");
    if (!find_setter(e.key)) throw ConfigError(line_no, e.key, "unknown key");
    for (const auto& prev : entries) {
      if (prev.key == e.key)
        throw ConfigError(line_no, e.key, "duplicate key (first set on line " + std::to_string(prev.line) + ")");
    }
    entries.push_back(std::move(e));
  }

  RunConfig config = toy_profile();
  for (const auto& e : entries) {
    if (e.key != "profile") continue;
    try {
      config = to_profile(e.value) == Profile::paper ? paper_profile() : toy_profile();
    } catch (const std::exception& ex) {
      throw ConfigError(e.line, e.key, ex.what());
    }
  }
  for (const auto& e : entries) {
    try {
      (*find_setter(e.key))(config, e.value);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& ex) {
      throw ConfigError(e.line, e.key, ex.what());
    }
  }
  try {
    config.validate();
  } catch (const ConfigError& ex) {
    for (const auto& e : entries) {
      if (e.key == ex.key()) throw ConfigError(e.line, e.key, ex.detail());
    }
    throw;
  }
  return config;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::ios_base::failure("cannot open config file '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return parse_config(os.str());
}

}  // namespace hair
