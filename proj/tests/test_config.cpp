#include "flowalign/config.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace flowalign;

namespace {

const char* kFull = R"(# toy experiment
[run]
seed = 7
output_dir = out

[data]
kind = mog_circle
n_samples = 5000

[flownet]
preset = toy
hidden = 64

[train]
preset = toy
steps = 300
lr = 2e-4

[align]
preset = default
latents = 50
steps = 20

[landscape]
resolution = 10
mc = 64

[eval]
n_data = 5
n_uniform = 5

[project]
kind = avg_pool
target_dim = 2
)";

// Expects a ConfigError whose key() is `key`.
void expect_error_key(const std::string& text, const std::string& key) {
  try {
    ExperimentConfig::from(ConfigFile::parse(text));
    ADD_FAILURE() << "no error for: " << text;
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), key) << e.what();
  }
}

}  // namespace

TEST(ConfigFile, ParsesSectionsCommentsAndWhitespace) {
  const ConfigFile f = ConfigFile::parse("# c\n\n[run]\n  seed =  3 \noutput_dir=a b\n");
  ASSERT_NE(f.find("run", "seed"), nullptr);
  EXPECT_EQ(*f.find("run", "seed"), "3");
  EXPECT_EQ(*f.find("run", "output_dir"), "a b");
  EXPECT_EQ(f.find("run", "nope"), nullptr);
  EXPECT_TRUE(f.has_section("run"));
  EXPECT_FALSE(f.has_section("data"));
  EXPECT_EQ(f.entries().front().line, 4);
}

TEST(ConfigFile, StructuralErrors) {
  EXPECT_THROW(ConfigFile::parse("seed = 1\n"), ConfigError);
  EXPECT_THROW(ConfigFile::parse("[run]\nseed\n"), ConfigError);
  EXPECT_THROW(ConfigFile::parse("[run\n"), ConfigError);
  EXPECT_THROW(ConfigFile::parse("[run]\nseed = 1\nseed = 2\n"), ConfigError);
  EXPECT_THROW(ConfigFile::parse("[nonsense]\n"), ConfigError);
}

TEST(ConfigFile, HashIgnoresOrderCommentsAndSpacing) {
  const ConfigFile a = ConfigFile::parse("[run]\nseed = 1\noutput_dir = x\n");
  const ConfigFile b = ConfigFile::parse("# hi\n[run]\noutput_dir=x\n\n  seed=1\n");
  const ConfigFile c = ConfigFile::parse("[run]\nseed = 2\noutput_dir = x\n");
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_NE(a.hash(), c.hash());
  EXPECT_EQ(a.hash().size(), 16u);
}

TEST(ExperimentConfig, FullFileAppliesPresetsAndOverrides) {
  const ExperimentConfig c = ExperimentConfig::from(ConfigFile::parse(kFull));
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.output_dir, "out");
  EXPECT_EQ(c.data.kind, ToyKind::mog_circle);
  EXPECT_EQ(c.data.components, 5);
  EXPECT_EQ(c.n_samples, 5000);
  EXPECT_EQ(c.flownet.hidden, 64);
  EXPECT_EQ(c.flownet.blocks, FlowNetConfig::toy().blocks);
  EXPECT_EQ(c.train.steps, 300);
  EXPECT_EQ(c.train.base_lr, 2e-4);
  EXPECT_EQ(c.train.batch, TrainConfig::toy().batch);
  EXPECT_EQ(c.train.seed, 7u);
  EXPECT_EQ(c.align.optimizer.latents, 50);
  EXPECT_EQ(c.align.optimizer.lr, AlignConfig{}.lr);
  EXPECT_EQ(c.align.optimizer.seed, 7u);
  EXPECT_EQ(c.landscape.resolution, 10);
  EXPECT_EQ(c.landscape.mc, 64);
  EXPECT_EQ(c.eval.n_data, 5);
  EXPECT_EQ(c.project.kind, ProjectionKind::avg_pool);
  EXPECT_NO_THROW(c.require_section("landscape"));
}

TEST(ExperimentConfig, UnknownKeyIsNamed) {
  expect_error_key(std::string(kFull) + "colour = red\n", "project.colour");
  expect_error_key("[train]\npreset = toy\nlearning_rate = 1\n", "train.learning_rate");
}

TEST(ExperimentConfig, MissingMandatoryKeyIsNamed) {
  expect_error_key("[run]\noutput_dir = x\n", "run.seed");
  expect_error_key("[data]\nkind = two_moons\n", "data.n_samples");
  expect_error_key("[flownet]\nhidden = 3\n", "flownet.preset");
  expect_error_key("[project]\nkind = pca\n", "project.target_dim");
}

TEST(ExperimentConfig, BadValuesAreNamed) {
  expect_error_key("[run]\nseed = -1\noutput_dir = x\n", "run.seed");
  expect_error_key("[run]\nseed = 1.5\noutput_dir = x\n", "run.seed");
  expect_error_key("[data]\nkind = swirl\nn_samples = 3\n", "data.kind");
  expect_error_key("[train]\npreset = toy\nlr = fast\n", "train.lr");
  expect_error_key("[train]\npreset = toy\nlr_schedule = step\n", "train.lr_schedule");
  expect_error_key("[landscape]\nresolution = 1\n", "landscape.resolution");
  expect_error_key("[train]\npreset = toy\nuse_ema = maybe\n", "train.use_ema");
  expect_error_key("[flownet]\npreset = huge\n", "flownet.preset");
}

TEST(ExperimentConfig, SemanticValidationStillRuns) {
  EXPECT_THROW(ExperimentConfig::from(ConfigFile::parse("[train]\npreset = toy\nsteps = -4\n")), ConfigError);
  EXPECT_THROW(ExperimentConfig::from(ConfigFile::parse("[align]\npreset = default\nlr = -1\n")), ConfigError);
}

TEST(ExperimentConfig, RequireSectionNamesFirstMandatoryKey) {
  const ExperimentConfig c = ExperimentConfig::from(ConfigFile::parse("[run]\nseed = 1\noutput_dir = x\n"));
  try {
    c.require_section("train");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "train.preset");
  }
}

TEST(LandscapeConfig, NodesRunY0Fastest) {
  LandscapeConfig l;
  l.resolution = 3;
  l.lo = -1;
  l.hi = 1;
  const DenseMatrix g = l.nodes();
  ASSERT_EQ(g.rows(), 9);
  EXPECT_EQ(g(0, 0), -1.0);
  EXPECT_EQ(g(1, 0), 0.0);
  EXPECT_EQ(g(1, 1), -1.0);
  EXPECT_EQ(g(3, 1), 0.0);
  EXPECT_EQ(g(8, 0), 1.0);
  EXPECT_EQ(g(8, 1), 1.0);
}

TEST(ExperimentConfig, LoadFromDiskAndMissingFile) {
  const auto p = std::filesystem::temp_directory_path() / "flowalign_test_config.ini";
  std::ofstream(p) << kFull;
  EXPECT_EQ(ExperimentConfig::load(p).config_hash, ConfigFile::parse(kFull).hash());
  EXPECT_THROW(ExperimentConfig::load(p.string() + ".missing"), ConfigError);
}

TEST(ShippedConfigs, AllParse) {
  Index seen = 0;
  for (const auto& e : std::filesystem::directory_iterator(FLOWALIGN_CONFIG_DIR)) {
    if (e.path().extension() != ".ini") continue;
    ++seen;
    EXPECT_NO_THROW(ExperimentConfig::load(e.path())) << e.path();
  }
  EXPECT_GE(seen, 3);
}
