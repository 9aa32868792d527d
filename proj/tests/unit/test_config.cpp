#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "spotdiff/config.hpp"
#include "spotdiff/error.hpp"

using namespace spotdiff;

TEST_CASE("defaults cover the documented keys") {
  const Config c = Config::defaults();
  CHECK(c.get_int("image.size") == 32);
  CHECK(c.get_int("features.d_enc") == 64);
  CHECK(c.get_int("mapper.layers") == 5);
  CHECK(c.get_int("expert.layers") == 3);
  CHECK(c.get_int("align.layers") == 2);
  CHECK(c.get_int("schedule.T") == 100);
  CHECK(c.get_string("sampler.kind") == "ddim");
  CHECK(c.get_string("decouple.mode") == "sequential");
  CHECK(c.get_double("train.base_lr") == 1e-4);
  CHECK(c.get_int("train.batch_size") == 8);
  CHECK(c.get_int("train.steps") == 500);
  CHECK(c.get_bool("encoder.bias"));
  CHECK(c.get_u64("seed") == 0);
}

TEST_CASE("parse overlays defaults and ignores comments") {
  const Config c = Config::parse("# comment\n\ntrain.steps = 42   # trailing\n  seed=7\n");
  CHECK(c.get_int("train.steps") == 42);
  CHECK(c.get_u64("seed") == 7);
  CHECK(c.get_int("image.size") == 32);
  CHECK_THROWS_AS(Config::parse("train.stpes = 3\n"), ConfigError);
  CHECK_THROWS_AS(Config::parse("just words\n"), ConfigError);
}

TEST_CASE("canonical text round-trips and hashes stably") {
  Config c = Config::defaults();
  c.set("train.steps", "77");
  const Config back = Config::parse(c.to_string());
  CHECK(back.values() == c.values());
  CHECK(back.hash() == c.hash());
  CHECK(c.hash() != Config::defaults().hash());
  CHECK(c.hash().size() == 16);
}

TEST_CASE("typed getters reject malformed values") {
  Config c = Config::defaults();
  c.set("train.steps", "ten");
  CHECK_THROWS_AS(c.get_int("train.steps"), ConfigError);
  c.set("train.steps", "3.5");
  CHECK_THROWS_AS(c.get_int("train.steps"), ConfigError);
  c.set("seed", "-1");
  CHECK_THROWS_AS(c.get_u64("seed"), ConfigError);
  c.set("train.base_lr", "fast");
  CHECK_THROWS_AS(c.get_double("train.base_lr"), ConfigError);
  c.set("encoder.bias", "maybe");
  CHECK_THROWS_AS(c.get_bool("encoder.bias"), ConfigError);
  CHECK_THROWS_AS(c.set("no.such.key", "1"), ConfigError);
  CHECK_THROWS_AS(c.get_string("no.such.key"), ConfigError);
}

TEST_CASE("environment overrides") {
  CHECK(Config::env_name("train.steps") == "SPOTDIFF_TRAIN_STEPS");
  CHECK(Config::env_name("backbone.pretrain_steps") == "SPOTDIFF_BACKBONE_PRETRAIN_STEPS");
  ::setenv("SPOTDIFF_TRAIN_STEPS", "123", 1);
  Config c = Config::parse("train.steps = 9\n");
  c.apply_env_overrides();
  ::unsetenv("SPOTDIFF_TRAIN_STEPS");
  CHECK(c.get_int("train.steps") == 123);
  c.set("train.steps", "5");
  CHECK(c.get_int("train.steps") == 5);
}

TEST_CASE("config files") {
  const auto dir = std::filesystem::path(SPOTDIFF_TEST_TMP) / "config";
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "a.cfg") << "loss.lambda1 = 0.5\n";
  CHECK(Config::load((dir / "a.cfg").string()).get_double("loss.lambda1") == 0.5);
  CHECK_THROWS_AS(Config::load((dir / "missing.cfg").string()), ConfigError);
}
