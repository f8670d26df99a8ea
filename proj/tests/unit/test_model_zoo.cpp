#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "featft/checkpoint.hpp"
#include "featft/dataset.hpp"
#include "featft/train.hpp"
#include "featft/zoo.hpp"
#include "helpers.hpp"

using namespace featft;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("featft_unit_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// Little-endian writer used to build the expected checkpoint bytes independently.
struct Bytes {
  std::vector<std::uint8_t> b;
  void u8(unsigned v) { b.push_back(static_cast<std::uint8_t>(v)); }
  void u16(unsigned v) { u8(v & 0xff), u8(v >> 8); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8((v >> (8 * i)) & 0xff);
  }
  void str(const std::string& s) { b.insert(b.end(), s.begin(), s.end()); }
  void f32(float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    u32(v);
  }
};

}  // namespace

TEST_CASE("the zoo holds three heterogeneous 10-class models") {
  const auto zoo = build_zoo();
  REQUIRE(zoo.size() == 3);
  CHECK(zoo_names() == std::vector<std::string>{"mini_plain", "mini_residual", "mini_branch"});
  CHECK(topology_class(zoo[0]) == Topology::plain);
  CHECK(topology_class(zoo[1]) == Topology::skip);
  CHECK(topology_class(zoo[2]) == Topology::branch);
  for (const auto& spec : zoo) {
    CAPTURE(spec.name);
    CHECK(spec.input_shape == Shape{3, 32, 32});
    CHECK(spec.class_count == 10);
    const double depth = tap_depth(spec, spec.default_tap);
    CHECK(depth >= 1.0 / 3.0);
    CHECK(depth <= 2.0 / 3.0);
    CHECK(spec.feature_shape(spec.default_tap).size() == 3);
    const auto s = test::share(spec);
    const Model m = test::random_model(s, 1);
    CHECK(forward(m, Image(spec.input_shape)).logits.size() == 10);
  }
  CHECK_THROWS_AS(zoo_spec("vgg16"), ConfigError);
}

TEST_CASE("sweep taps are cut points in layer order") {
  for (const auto& spec : build_zoo()) {
    const auto taps = sweep_taps(spec);
    REQUIRE(taps.size() >= 3);
    CHECK(std::is_sorted(taps.begin(), taps.end()));
    CHECK(std::find(taps.begin(), taps.end(), spec.default_tap) != taps.end());
    for (const TapPoint t : taps) CHECK_NOTHROW(validate_tap(spec, t));
  }
}

TEST_CASE("spec validation rejects incompatible layers") {
  SpecBuilder b("bad", {3, 8, 8}, 4);
  const int c = b.conv(kNetworkInput, 4, 3, "c");
  const int p = b.max_pool(c);
  CHECK_THROWS_AS(b.add(c, p, "mismatch"), ConfigError);
  SpecBuilder d("notap", {3, 8, 8}, 4);
  const int x = d.global_avg_pool(d.conv(kNetworkInput, 4, 3, "c"));
  d.dense(x, 4, "fc");
  CHECK_THROWS_AS(d.finish({x}), ConfigError);
}

TEST_CASE("checkpoint bytes follow the documented layout") {
  SpecBuilder b("m", {1, 2, 2}, 2);
  const int id = b.avg_pool(kNetworkInput, 1);
  b.dense(id, 2, "fc");
  const auto spec = test::share(b.finish({id}));
  Model m{spec, {Tensor({2, 4}, std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8}), Tensor({2}, std::vector<float>{-1, 0.5f})}};
  const Checkpoint cp = make_checkpoint(m, TrainingMeta{3, 2, 0.75});

  const auto bytes = encode_checkpoint(cp);
  Bytes e;
  e.str("FTW1");
  e.u32(1);
  e.u32(static_cast<std::uint32_t>(cp.tensors.size() + 4));
  for (const auto& [name, t] : cp.tensors) {
    e.u16(static_cast<unsigned>(name.size()));
    e.str(name);
    e.u8(static_cast<unsigned>(t.rank()));
    for (int d = 0; d < t.rank(); ++d) e.u32(static_cast<std::uint32_t>(t.dim(d)));
    for (const float v : t.storage()) e.f32(v);
  }
  for (const std::string meta : {"@model=m", "@seed=3", "@epochs=2", "@accuracy=0.75"}) {
    e.u16(static_cast<unsigned>(meta.size()));
    e.str(meta);
    e.u8(1);
    e.u32(0);
  }
  CHECK(bytes == e.b);
  CHECK(cp.tensors[0].first == "fc.weight");
  CHECK(cp.tensors[1].first == "fc.bias");

  const Checkpoint back = decode_checkpoint(bytes);
  CHECK(back == cp);
  CHECK(back.meta.seed == 3);
  CHECK(back.meta.epochs == 2);
  CHECK(back.meta.accuracy == 0.75);
  const Model loaded = model_from_checkpoint(back, spec);
  CHECK(loaded.params[0] == m.params[0]);
}

TEST_CASE("checkpoint errors name the failing offset") {
  const auto spec = zoo_spec("mini_plain");
  Rng rng(1);
  const Checkpoint cp = make_checkpoint(init_model(spec, rng), {});
  auto bytes = encode_checkpoint(cp);

  auto bad = bytes;
  bad[0] = 'X';
  try {
    decode_checkpoint(bad);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 0);
  }
  bad = bytes;
  bad[4] = 9;
  try {
    decode_checkpoint(bad);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 4);
  }
  bad.assign(bytes.begin(), bytes.begin() + 40);
  CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);

  Checkpoint missing = cp;
  missing.tensors.erase(missing.tensors.begin());
  CHECK_THROWS_AS(model_from_checkpoint(missing, spec), ConfigError);
  CHECK_THROWS_AS(model_from_checkpoint(cp, zoo_spec("mini_branch")), ConfigError);

  const auto dir = scratch_dir("ckpt");
  save_checkpoint(cp, dir / "mini_plain.ftw");
  CHECK(load_checkpoint(dir / "mini_plain.ftw") == cp);
  CHECK(load_zoo_model(dir, "mini_plain").params == init_model(spec, *std::make_unique<Rng>(1)).params);
  CHECK_THROWS_AS(load_checkpoint(dir / "absent.ftw"), IoError);
}

TEST_CASE("training is deterministic per seed and validates its config") {
  const Dataset ds = gen_synthetic_dataset(SyntheticOptions{11, 1, 0.0});
  REQUIRE(ds.samples.size() == 10);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  const auto spec = zoo_spec("mini_branch");
  const Checkpoint a = train(spec, ds, cfg);
  const Checkpoint b = train(spec, ds, cfg);
  CHECK(encode_checkpoint(a) == encode_checkpoint(b));
  CHECK(a.meta.accuracy >= 0.0);
  CHECK(a.meta.accuracy <= 1.0);
  CHECK(a.meta.epochs == 1);

  cfg.seed = 2;
  CHECK(checkpoint_digest(train(spec, ds, cfg)) != checkpoint_digest(a));

  TrainConfig bad;
  bad.learning_rate = 0;
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = {};
  bad.batch_size = 0;
  CHECK_THROWS_AS(validate(bad), ConfigError);
}

TEST_CASE("divergent training raises a training error with the epoch") {
  const Dataset ds = gen_synthetic_dataset(SyntheticOptions{12, 2, 0.0});
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.learning_rate = 1e30;
  try {
    train(zoo_spec("mini_plain"), ds, cfg);
    FAIL("expected divergence");
  } catch (const TrainingError& e) {
    CHECK(e.epoch() >= 0);
  }
}

TEST_CASE("checkpoint digests are frozen for a fixed seed") {
  // Recorded from a -march=native build and checked against a portable build.
  const Dataset ds = gen_synthetic_dataset(SyntheticOptions{11, 1, 0.0});
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  const std::pair<const char*, const char*> frozen[] = {
      {"mini_plain", "c6da914b371b593c"}, {"mini_residual", "6c8acf1edccf3b86"}, {"mini_branch", "51aa982df8f761d8"}};
  for (const auto& [name, digest] : frozen) {
    CAPTURE(name);
    CHECK(checkpoint_digest(train(zoo_spec(name), ds, cfg)) == digest);
  }
}
