#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "virda/config.hpp"
#include "virda/model.hpp"

using namespace virda;
namespace fs = std::filesystem;

TEST(RunConfig, DefaultsFollowTheMethod) {
  const TrainConfig c;
  EXPECT_EQ(c.batch_size, 32);
  EXPECT_EQ(c.passes, 8);
  EXPECT_DOUBLE_EQ(c.p_mask, 0.5);
  EXPECT_EQ(c.disc_hidden, std::vector<int>{1024});
  EXPECT_EQ(c.losses, LossMask::full());
  EXPECT_NO_THROW(c.validate());
}

TEST(RunConfig, TextRoundTrip) {
  RunSpec spec;
  apply_setting(spec, "epochs", "17");
  apply_setting(spec, "losses", "sup,adv,distrib");
  apply_setting(spec, "classifier_hidden", "64,32");
  apply_setting(spec, "shift_invert", "true");
  apply_setting(spec, "backbone", "resnet50");
  apply_setting(spec, "lr_vr", "0.00025");
  const RunSpec back = parse_run_spec(to_text(spec));
  EXPECT_EQ(to_text(back), to_text(spec));
  EXPECT_EQ(back.train.epochs, 17);
  EXPECT_EQ(back.train.classifier_hidden, (std::vector<int>{64, 32}));
  EXPECT_TRUE(back.data.shift.invert);
  EXPECT_EQ(back.train.backbone, Arch::resnet50);
  EXPECT_DOUBLE_EQ(back.train.lr_vr, 0.00025);
  EXPECT_EQ(back.train.losses, LossMask::parse("sup,adv,distrib"));
}

TEST(RunConfig, KeysAreUnique) {
  const auto keys = setting_keys();
  EXPECT_EQ(std::set<std::string>(keys.begin(), keys.end()).size(), keys.size());
}

TEST(RunConfig, ParseErrorsNameTheLine) {
  try {
    parse_run_spec("epochs = 3\n# comment\nbogus_key = 1\n", "x.cfg");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("x.cfg:3"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_run_spec("epochs 3\n"), ConfigError);
  EXPECT_THROW(parse_run_spec("epochs = three\n"), ConfigError);
  EXPECT_THROW(parse_run_spec("aggregate_unc = maybe\n"), ConfigError);
}

TEST(RunConfig, ValidationRejectsBadValues) {
  auto bad = [](const char* key, const char* value) {
    RunSpec s;
    apply_setting(s, key, value);
    EXPECT_THROW(s.train.validate(), ConfigError) << key << " = " << value;
  };
  bad("lr_heads", "0");
  bad("p_mask", "1.0");
  bad("batch_size", "0");
  bad("passes", "1");
  bad("tau", "1.5");
  bad("epochs", "0");
  RunSpec ok;
  apply_setting(ok, "losses", "sup");
  apply_setting(ok, "passes", "1");
  EXPECT_NO_THROW(ok.train.validate());
}

TEST(RunConfig, RelativePathsResolveAgainstConfigFile) {
  const fs::path dir = fs::temp_directory_path() / "virda_cfg_test";
  fs::create_directories(dir);
  std::ofstream(dir / "run.cfg") << "data_root = data\nbackbone_weights = w/tiny.safetensors\n";
  const RunSpec spec = load_run_spec(dir / "run.cfg");
  EXPECT_EQ(spec.data.root, dir / "data");
  EXPECT_EQ(*spec.train.backbone_weights, dir / "w/tiny.safetensors");
  EXPECT_THROW(load_run_spec(dir / "missing.cfg"), ConfigError);
  fs::remove_all(dir);
}

TEST(RunConfig, ShippedConfigsParse) {
  for (const char* name : {"synth.cfg", "digits.cfg", "office31_vit.cfg"}) {
    const RunSpec spec = load_run_spec(fs::path(VIRDA_SOURCE_DIR) / "configs" / name);
    EXPECT_NO_THROW(spec.train.validate()) << name;
  }
}

TEST(EvalRouting, SourceOnlyUsesSourceHeadWithoutVr) {
  const EvalRoute so = eval_route(LossMask::source_only());
  EXPECT_EQ(so.vr, EvalRoute::Vr::none);
  EXPECT_EQ(so.head, Domain::source);
  const EvalRoute full = eval_route(LossMask::full());
  EXPECT_EQ(full.vr, EvalRoute::Vr::target);
  EXPECT_EQ(full.head, Domain::target);
}
