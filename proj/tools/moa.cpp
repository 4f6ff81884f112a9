// SPDX-License-Identifier: Apache-2.0
//
// moa <stage> --config cfg.json [--threads N] [--out DIR] [--budget F] [--seed N]
// Exit codes: 0 success, 2 rejected input or dependency, 1 anything else.

#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "moa/eval_harness.hpp"
#include "moa/pipeline.hpp"
#include "moa/plan_optimizer.hpp"

namespace {

std::string stage_list() {
    std::string s = "all, print-config";
    for (const auto& n : moa::stage_names()) s += ", " + n;
    return s;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Mixture-of-attention span search on a toy transformer"};
    std::string stage;
    std::string config_path;
    int threads = 0;
    std::optional<std::string> out;
    std::optional<double> budget;
    std::optional<std::uint64_t> seed;
    app.add_option("stage", stage, "Stage to run: " + stage_list())->required();
    app.add_option("--config", config_path, "Pipeline config (JSON); defaults apply when omitted");
    app.add_option("--threads", threads, "Worker threads (0: hardware concurrency)")->check(CLI::NonNegativeNumber);
    app.add_option("--out", out, "Output directory (overrides the config)");
    app.add_option("--budget", budget, "Density budget (overrides the config)");
    app.add_option("--seed", seed, "Master seed (overrides the config)");
    CLI11_PARSE(app, argc, argv);

    try {
        moa::PipelineConfig config =
            config_path.empty() ? moa::default_pipeline_config() : moa::load_pipeline_config(config_path);
        if (out) config.out = *out;
        if (budget) config.budgets = {*budget};
        if (seed) config.seed = *seed;
        if (threads > 0) moa::set_default_thread_count(threads);
        if (stage == "print-config") {
            std::cout << moa::pipeline_config_to_json(config).dump(2) << '\n';
            return 0;
        }
        const auto results = moa::run_stage(stage, config, [](const std::string& s) { std::cerr << s << '\n'; });
        for (const auto& r : results) {
            std::cout << r.stage << (r.cached ? " cached" : " ran") << ' ' << r.seconds << "s\n";
        }
        return 0;
    } catch (const moa::InfeasibleError& e) {
        std::cerr << "infeasible: " << e.what() << '\n';
        return 2;
    } catch (const moa::DependencyError& e) {
        std::cerr << "dependency: " << e.what() << '\n';
        return 2;
    } catch (const moa::ComparabilityError& e) {
        std::cerr << "not comparable: " << e.what() << '\n';
        return 2;
    } catch (const moa::InputError& e) {
        std::cerr << "input: " << e.what() << '\n';
        return 2;
    } catch (const moa::PlanError& e) {
        std::cerr << "plan: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
