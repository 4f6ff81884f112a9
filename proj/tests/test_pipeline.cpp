// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "moa/pipeline.hpp"
#include "support.hpp"

namespace moa {
namespace {

namespace fs = std::filesystem;

PipelineConfig tiny_config(const fs::path& out) {
    PipelineConfig c = default_pipeline_config();
    c.model.n_layers = 2;
    c.model.n_heads_per_layer = 2;
    c.model.head_dim = 8;
    c.model.d_model = 16;
    c.model.mlp_hidden = 16;
    c.model.max_context = 256;
    TrainPhase phase;
    phase.length = 32;
    phase.steps = 10;
    phase.batch_size = 4;
    phase.corpus_size = 40;
    c.train = {phase};
    c.calibration.items_per_level = 3;
    c.calibration.levels = {64, 128};
    c.grid_reference_length = 128;
    c.profile_lengths = {64, 128};
    c.constraint_lengths = {64, 128};
    c.budgets = {0.25, 0.5};
    c.validation_length = 96;
    c.validation_items = 3;
    c.eval.lengths = {64, 128};
    c.eval.items_per_cell = 2;
    c.eval.perplexity_items = 2;
    c.eval.report_length = 128;
    c.simulate.prompt_length = 64;
    c.simulate.prompts = 1;
    c.simulate.decode_steps = 8;
    c.out = out.string();
    return c;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class Pipeline : public ::testing::Test {
protected:
    static fs::path dir() { return fs::temp_directory_path() / "moa_test_pipeline_main"; }

    static void SetUpTestSuite() {
        fs::remove_all(dir());
        first_ = run_stage("all", tiny_config(dir()));
    }

    static std::vector<StageResult> first_;
};

std::vector<StageResult> Pipeline::first_;

TEST_F(Pipeline, RunsEveryStageThenCachesThem) {
    ASSERT_EQ(first_.size(), stage_names().size());
    for (const auto& r : first_) EXPECT_FALSE(r.cached) << r.stage;
    const std::string manifest = read_file(dir() / "manifest.json");
    const auto second = run_stage("all", tiny_config(dir()));
    for (const auto& r : second) EXPECT_TRUE(r.cached) << r.stage;
    EXPECT_EQ(read_file(dir() / "manifest.json"), manifest);
}

TEST_F(Pipeline, WritesFixedArtifactNames) {
    for (const char* f : {"model.ckpt", "influence_64.bin", "influence_128.bin", "rule_table.json", "front.json",
                          "plan.json", "report_summary.json", "report_cost.csv", "manifest.json"}) {
        EXPECT_TRUE(fs::exists(dir() / f)) << f;
    }
    // the uniform comparison is written unless the plans' densities are not comparable
    const nlohmann::json summary = nlohmann::json::parse(read_file(dir() / "report_summary.json"));
    EXPECT_EQ(fs::exists(dir() / "report_accuracy.csv"), !summary.contains("comparability_error"));
    const nlohmann::json m = nlohmann::json::parse(read_file(dir() / "manifest.json"));
    for (const auto& s : stage_names()) {
        const auto& rec = m.at("stages").at(s);
        EXPECT_TRUE(rec.contains("config_hash"));
        EXPECT_TRUE(rec.contains("inputs"));
        EXPECT_TRUE(rec.at("duration_seconds").is_number());
        EXPECT_FALSE(rec.at("outputs").empty());
    }
}

TEST_F(Pipeline, TwoBudgetsGiveTwoPlansWithinTheirBudgets) {
    const PipelineConfig c = tiny_config(dir());
    const MoAPlan low = load_plan((dir() / plan_file(c, 0.25)).string());
    const MoAPlan high = load_plan((dir() / plan_file(c, 0.5)).string());
    EXPECT_NE(plan_file(c, 0.25), plan_file(c, 0.5));
    for (int n : c.constraint_lengths) {
        // independent recomputation from the rules
        double sum_low = 0.0, sum_high = 0.0;
        for (int l = 0; l < 2; ++l) {
            for (int h = 0; h < 2; ++h) {
                sum_low += density_of(low.rule(l, h), n, c.geometry);
                sum_high += density_of(high.rule(l, h), n, c.geometry);
            }
        }
        EXPECT_NEAR(plan_density(low, n), sum_low / 4.0, 1e-12);
        EXPECT_LE(sum_low / 4.0, 0.25 + 1e-9) << n;
        EXPECT_LE(sum_high / 4.0, 0.5 + 1e-9) << n;
        EXPECT_LE(sum_low / 4.0 - 0.5 * sum_high / 4.0, static_cast<double>(c.geometry.block_size) / n) << n;
    }
}

TEST_F(Pipeline, TamperedInfluenceFileStopsTheOptimizer) {
    const fs::path copy = fs::temp_directory_path() / "moa_test_pipeline_tamper";
    fs::remove_all(copy);
    fs::copy(dir(), copy, fs::copy_options::recursive);
    {
        std::fstream f(copy / "influence_64.bin", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(-3, std::ios::end);
        f.put('\x5a');
    }
    try {
        run_stage("optimize", tiny_config(copy));
        FAIL() << "expected DependencyError";
    } catch (const DependencyError& e) {
        EXPECT_EQ(e.stage(), "profile");
        EXPECT_NE(std::string(e.what()).find("influence_64.bin"), std::string::npos);
    }
}

TEST_F(Pipeline, ChangedBudgetRerunsOnlyDownstreamStages) {
    const fs::path copy = fs::temp_directory_path() / "moa_test_pipeline_budget";
    fs::remove_all(copy);
    fs::copy(dir(), copy, fs::copy_options::recursive);
    PipelineConfig c = tiny_config(copy);
    c.budgets = {0.3};
    const auto r = run_stage("all", c);
    for (const auto& s : r) {
        const bool upstream = s.stage == "gen" || s.stage == "train" || s.stage == "calibrate" || s.stage == "profile";
        EXPECT_EQ(s.cached, upstream) << s.stage;
    }
}

TEST(PipelineErrors, MissingUpstreamNamesTheProducer) {
    const auto d = test::temp_dir("pipeline_missing");
    try {
        run_stage("train", tiny_config(d));
        FAIL() << "expected DependencyError";
    } catch (const DependencyError& e) {
        EXPECT_EQ(e.stage(), "gen");
    }
    EXPECT_THROW(run_stage("polish", tiny_config(d)), InputError);
}

TEST(PipelineConfig, JsonRoundTrip) {
    PipelineConfig c = tiny_config("somewhere");
    c.calibration.mode = CalibrationMode::kGenericLocal;
    c.train.push_back(TrainPhase{});
    c.train.back().mix.copy_ratio = 0.25;
    const nlohmann::json j = pipeline_config_to_json(c);
    EXPECT_EQ(pipeline_config_to_json(pipeline_config_from_json(j)), j);
    const auto path = test::temp_dir("pipeline_cfg") / "c.json";
    std::ofstream(path) << j.dump(2);
    EXPECT_EQ(pipeline_config_to_json(load_pipeline_config(path.string())), j);
}

TEST(PipelineConfig, MissingFieldsKeepDefaults) {
    const PipelineConfig c = pipeline_config_from_json(nlohmann::json{{"seed", 9}});
    EXPECT_EQ(c.seed, 9u);
    EXPECT_EQ(pipeline_config_to_json(c).at("profile_lengths"),
              pipeline_config_to_json(default_pipeline_config()).at("profile_lengths"));
}

TEST(PipelineConfig, ValidationLengthMustBeUnseen) {
    PipelineConfig c = tiny_config("x");
    EXPECT_NO_THROW(c.validate());
    c.validation_length = 128;
    EXPECT_THROW(c.validate(), InputError);
}

TEST(PipelineConfig, RejectsBadValues) {
    PipelineConfig c = tiny_config("x");
    c.budgets = {0.0};
    EXPECT_THROW(c.validate(), InputError);
    c = tiny_config("x");
    c.constraint_lengths = {256};
    EXPECT_THROW(c.validate(), InputError);
    c = tiny_config("x");
    c.train.clear();
    EXPECT_THROW(c.validate(), InputError);
    EXPECT_NO_THROW(default_pipeline_config().validate());
}

}  // namespace
}  // namespace moa
