#include "helpers.hpp"

#include "hair/cli.hpp"
#include "hair/config.hpp"
#include "hair/image_io.hpp"
#include "hair/training.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

using namespace hair;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

CliRun run(std::vector<std::string> args) {
  args.insert(args.begin(), "hair");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  CliRun r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path temp_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("hair_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, const std::string& text) { std::ofstream(path, std::ios::binary) << text; }

const char* kTinyConfig =
    "profile = toy\n"
    "channels = 4\n"
    "heads = 1,1,1,1\n"
    "steps = 6\n"
    "batch = 2\n"
    "patch = 16\n"
    "image_size = 32\n"
    "train_images = 4\n"
    "val_images = 2\n"
    "eval_every = 3\n"
    "log_every = 3\n"
    "tasks = noise:sigma=25;haze\n";

// Checkpoint of an untrained tiny model, optionally with a zero output conv.
fs::path tiny_checkpoint(const fs::path& dir, bool zero_output) {
  const RunConfig c = parse_config(kTinyConfig);
  Model<float> model(c.model_desc(), c.seed);
  if (zero_output) model.output_conv().mutable_value().set_zero();
  const fs::path path = dir / (zero_output ? "identity.hair" : "model.hair");
  save_checkpoint(make_checkpoint(c, model, nullptr, 0), path.string());
  return path;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("config parsing round trips and profile defaults") {
  const RunConfig c = parse_config(kTinyConfig);
  CHECK(c.channels == 4);
  CHECK(c.tasks.size() == 2);
  CHECK(c.box_sizes == std::vector<int>{2, 2, 2, 2});
  CHECK(parse_config(c.serialize()).serialize() == c.serialize());
  const RunConfig paper = parse_config("profile = paper  # full recipe\n");
  CHECK(paper.blocks == std::vector<int>{4, 6, 6, 8});
  CHECK(paper.box_sizes == std::vector<int>{5, 7, 7, 9});
  CHECK(parse_config(paper_profile().serialize()).serialize() == paper_profile().serialize());
  CHECK(parse_config(toy_profile().serialize()).serialize() == toy_profile().serialize());
}

TEST_CASE("config diagnostics name the line and key") {
  const std::vector<std::tuple<std::string, int, std::string>> cases{
      {"channels = 4\nwidth = 3\n", 2, "width"},
      {"channels = 4\n\n# c\nchannels = 8\n", 4, "channels"},
      {"batch = 0\n", 1, "batch"},
      {"lr = fast\n", 1, "lr"},
      {"steps = 10\nblocks = 1,1,x\n", 2, "blocks"},
      {"tasks = fog\n", 1, "tasks"},
      {"box_sizes = 2,2,2\n", 1, "box_sizes"},
      {"profile = huge\n", 1, "profile"},
  };
  for (const auto& [text, line, key] : cases) {
    CAPTURE(text);
    try {
      parse_config(text);
      FAIL("accepted");
    } catch (const ConfigError& e) {
      CHECK(e.line() == line);
      CHECK(e.key() == key);
      CHECK(std::string(e.what()).find(key) != std::string::npos);
    }
  }
  try {
    parse_config("just words\n");
    FAIL("accepted");
  } catch (const ConfigError& e) {
    CHECK(e.line() == 1);
  }
}

TEST_CASE("config parsing is total on arbitrary text") {
  std::mt19937_64 rng(5);
  const std::string keys[] = {"channels", "steps", "lr", "tasks", "blocks", "heads", "split", "patch", "bogus", ""};
  const std::string values[] = {"4", "-1", "1e400", "nan", "noise:sigma=25", "1,2", "", "=", "\xff\xfe", "0x10", "2.5"};
  const std::string alphabet = "=#,:;.+-| \n\tabcz019\x01";
  int parsed = 0, rejected = 0;
  for (int draw = 0; draw < 3000; ++draw) {
    std::string text;
    if (draw % 2 == 0) {
      for (int l = 0; l < testing::uniform_int(rng, 1, 5); ++l)
        text += keys[rng() % std::size(keys)] + " = " + values[rng() % std::size(values)] + "\n";
    } else {
      for (int i = 0; i < testing::uniform_int(rng, 0, 60); ++i) text += alphabet[rng() % alphabet.size()];
    }
    try {
      parse_config(text).validate();
      ++parsed;
    } catch (const ConfigError&) {
      ++rejected;
    }
  }
  CHECK(parsed + rejected == 3000);
  CHECK(parsed > 0);
  CHECK(rejected > 0);
}

TEST_CASE("exit codes") {
  const auto dir = temp_dir("exit");
  CHECK(run({}).code == kExitInvalidConfig);
  CHECK(run({"frobnicate"}).code == kExitInvalidConfig);
  CHECK(run({"check", "--suite", "nope"}).code == kExitInvalidConfig);
  CHECK(run({"--help"}).code == kExitOk);

  write_file(dir / "bad.cfg", "channels = 4\nbatch = -3\n");
  const CliRun bad = run({"train", "--config", (dir / "bad.cfg").string()});
  CHECK(bad.code == kExitInvalidConfig);
  CHECK(bad.err.find("line 2") != std::string::npos);
  CHECK(bad.err.find("batch") != std::string::npos);

  CHECK(run({"train", "--config", (dir / "missing.cfg").string()}).code == kExitMissingFile);
  CHECK(run({"restore", "--ckpt", (dir / "missing.hair").string(), "--in", "a.ppm", "--out", "b.ppm"}).code ==
        kExitMissingFile);
  write_file(dir / "corrupt.hair", "HAIR\x01garbage");
  CHECK(run({"eval", "--ckpt", (dir / "corrupt.hair").string(), "--synthetic", "noise"}).code == kExitMissingFile);

  const fs::path ckpt = tiny_checkpoint(dir, false);
  CHECK(run({"restore", "--ckpt", ckpt.string(), "--in", (dir / "none.ppm").string(), "--out",
             (dir / "o.ppm").string()})
            .code == kExitMissingFile);
  CHECK(run({"eval", "--ckpt", ckpt.string(), "--synthetic", "fog"}).code == kExitInvalidConfig);
  CHECK(run({"eval", "--ckpt", ckpt.string()}).code == kExitInvalidConfig);

  write_file(dir / "negative.cfg", std::string(kTinyConfig) + "lr = -1\noutput_dir = " + (dir / "neg").string() + "\n");
  CHECK(run({"train", "--quiet", "--config", (dir / "negative.cfg").string()}).code == kExitInvalidConfig);
  fs::remove_all(dir);
}

TEST_CASE("check --suite distributivity succeeds") {
  const CliRun r = run({"check", "--suite", "distributivity"});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("PASS distributivity") != std::string::npos);
  CHECK(r.out.find("FAIL") == std::string::npos);
}

TEST_CASE("restore with a zero output conv reproduces the input file") {
  const auto dir = temp_dir("restore");
  const fs::path ckpt = tiny_checkpoint(dir, true);
  const fs::path model = tiny_checkpoint(dir, false);
  for (const auto& [h, w] : std::vector<std::pair<Index, Index>>{{32, 32}, {16, 16}, {37, 21}, {20, 50}}) {
    CAPTURE(h);
    CAPTURE(w);
    const fs::path in = dir / "in.ppm", out = dir / "out.ppm";
    write_ppm(add_gaussian_noise(gen_clean(static_cast<std::uint64_t>(h * w), std::max<Index>(h, 16), std::max<Index>(w, 16)), 25, 1), in.string());
    REQUIRE(run({"restore", "--ckpt", ckpt.string(), "--in", in.string(), "--out", out.string()}).code == kExitOk);
    CHECK(read_file(out) == read_file(in));
    REQUIRE(run({"restore", "--ckpt", model.string(), "--in", in.string(), "--out", out.string()}).code == kExitOk);
    CHECK(read_ppm(out.string()).shape() == read_ppm(in.string()).shape());
  }
  fs::remove_all(dir);
}

TEST_CASE("train twice gives byte-identical logs and checkpoints") {
  const auto dir = temp_dir("train");
  write_file(dir / "run.cfg", kTinyConfig);
  const std::string out_dir = (dir / "run").string();
  const CliRun a = run({"train", "--quiet", "--config", (dir / "run.cfg").string(), "--output-dir", out_dir});
  REQUIRE(a.code == kExitOk);
  CHECK(a.err.empty());
  const std::string log_a = read_file(dir / "run" / "log.csv"), ckpt_a = read_file(dir / "run" / "checkpoint.hair");
  const CliRun b = run({"train", "--config", (dir / "run.cfg").string(), "--output-dir", out_dir});
  REQUIRE(b.code == kExitOk);
  CHECK(b.err.find("step 3/6") != std::string::npos);
  CHECK(read_file(dir / "run" / "log.csv") == log_a);
  CHECK((read_file(dir / "run" / "checkpoint.hair") == ckpt_a));
  CHECK(log_a.starts_with("step,lr,train_loss,psnr_noise,ssim_noise,psnr_haze,ssim_haze\n"));
  fs::remove_all(dir);
}

TEST_CASE("eval and giv CSV exports") {
  const auto dir = temp_dir("csv");
  const fs::path ckpt = tiny_checkpoint(dir, false);

  const CliRun eval = run({"eval", "--ckpt", ckpt.string(), "--synthetic", "noise:sigma=25;haze;noise+haze", "--count",
                           "3", "--size", "32"});
  REQUIRE(eval.code == kExitOk);
  std::istringstream lines(eval.out);
  std::string line;
  std::getline(lines, line);
  CHECK(line == "label,n,psnr,ssim,giv_midpoint");
  std::vector<std::string> labels;
  while (std::getline(lines, line)) labels.push_back(line.substr(0, line.find(',')));
  CHECK(labels == std::vector<std::string>{"noise", "haze", "noise+haze"});
  CHECK(eval.err.find("degraded input") != std::string::npos);

  const fs::path out = dir / "giv.csv";
  REQUIRE(run({"giv", "--ckpt", ckpt.string(), "--synthetic", "rain;haze", "--count", "2", "--size", "32", "--out",
               out.string()})
              .code == kExitOk);
  std::istringstream giv(read_file(out));
  std::getline(giv, line);
  CHECK(line == "id,label,v_0,v_1,v_2,v_3,v_4,v_5,v_6,v_7");
  int rows = 0;
  while (std::getline(giv, line)) {
    ++rows;
    CHECK(std::count(line.begin(), line.end(), ',') == 9);
  }
  CHECK(rows == 4);

  write_file(dir / "manifest.csv", "id,source,spec\na,seed:3,noise:sigma=15\nb,seed:4,haze:t=0.5\n");
  const CliRun manifest = run({"giv", "--ckpt", ckpt.string(), "--data", dir.string(), "--size", "32"});
  REQUIRE(manifest.code == kExitOk);
  CHECK(manifest.out.find("\na,noise,") != std::string::npos);
  CHECK(manifest.out.find("\nb,haze,") != std::string::npos);
  write_file(dir / "manifest.csv", "id,path\n");
  CHECK(run({"giv", "--ckpt", ckpt.string(), "--data", dir.string()}).code == kExitInvalidConfig);
  fs::remove_all(dir);
}

TEST_CASE("PPM images round trip through 8-bit quantization") {
  const auto dir = temp_dir("ppm");
  const Image img = gen_clean(9, 24, 17);
  write_ppm(img, (dir / "a.ppm").string());
  const Image back = read_ppm((dir / "a.ppm").string());
  CHECK(back.shape() == img.shape());
  CHECK(testing::max_abs_diff(back, img) <= 0.5 / 255.0 + 1e-6);
  write_ppm(back, (dir / "b.ppm").string());
  CHECK(read_file(dir / "a.ppm") == read_file(dir / "b.ppm"));
  write_file(dir / "bad.ppm", "P6\n4 4\n255\nxx");
  CHECK_THROWS_AS(read_ppm((dir / "bad.ppm").string()), ImageIoError);
  fs::remove_all(dir);
}

}  // TEST_SUITE
