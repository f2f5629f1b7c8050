// flowcal: experiment runner for amortized variational inference with
// physics-based latent distribution correction on the Born-lite problem.
//
// Exit codes: 0 success, 2 validation failure, 3 numerical divergence,
// 4 verification-trend failure.

#include <CLI11.hpp>

#include <iostream>
#include <string>

#include "flowcal/commands.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitTrend = 4;

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"amortized variational inference with latent distribution correction"};
    app.require_subcommand(1);
    app.fallthrough(); // accept global options after the subcommand name

    std::string config_path;
    std::string out_override;
    uint64_t seed_override = 0;
    bool seed_given = false;
    app.add_option("--config", config_path, "experiment config (JSON)")->required();
    app.add_option("--out", out_override, "override the output directory");
    app.add_option("--seed", seed_override, "override every seed in the config")
        ->each([&](const std::string&) { seed_given = true; });

    auto* cmd_gen = app.add_subcommand("gen-data", "generate the training dataset");
    auto* cmd_tr = app.add_subcommand("train", "pretrain the conditional flow");
    auto* cmd_co = app.add_subcommand("correct", "fit the latent correction for the shift scenario");
    auto* cmd_in = app.add_subcommand("infer", "sample the posterior and export statistics");
    auto* cmd_ve = app.add_subcommand("verify", "run the posterior-contraction sweep");
    auto* cmd_or = app.add_subcommand("oracle-check", "run the exact-oracle battery");

    std::string dataset_dir, checkpoint_path, correction_path;
    cmd_tr->add_option("--dataset", dataset_dir, "dataset directory (default <out>/dataset)");
    cmd_co->add_option("--checkpoint", checkpoint_path,
                       "flow checkpoint (default <out>/train/checkpoint.bin)");
    cmd_in->add_option("--checkpoint", checkpoint_path,
                       "flow checkpoint (default <out>/train/checkpoint.bin)");
    cmd_in->add_option("--correction", correction_path, "latent correction blob (optional)");
    cmd_ve->add_option("--checkpoint", checkpoint_path,
                       "flow checkpoint (default <out>/train/checkpoint.bin)");

    CLI11_PARSE(app, argc, argv);

    try {
        flowcal::ExperimentConfig cfg = flowcal::load_config(config_path);
        if (!out_override.empty()) cfg.out_dir = out_override;
        if (seed_given) {
            const flowcal::Rng base(seed_override);
            cfg.seed_dataset = base.fork(1).seed();
            cfg.seed_inference = base.fork(2).seed();
            cfg.train.seed = base.fork(3).seed();
            cfg.correction.seed = base.fork(4).seed();
            cfg.scenario.truth_seed = base.fork(5).seed();
        }
        if (dataset_dir.empty()) dataset_dir = cfg.out_dir + "/dataset";
        if (checkpoint_path.empty()) checkpoint_path = cfg.out_dir + "/train/checkpoint.bin";

        if (cmd_gen->parsed()) {
            const std::string dir = flowcal::cmd_gen_data(cfg);
            std::cout << "dataset written to " << dir << "\n";
        } else if (cmd_tr->parsed()) {
            const flowcal::TrainOutputs out = flowcal::cmd_train(cfg, dataset_dir);
            std::cout << "checkpoint " << out.checkpoint << "\ncurves " << out.curves << "\n";
            if (out.diverged) {
                std::cerr << "training diverged; last finite checkpoint retained\n";
                return kExitDivergence;
            }
        } else if (cmd_co->parsed()) {
            const flowcal::CorrectOutputs out = flowcal::cmd_correct(cfg, checkpoint_path);
            std::cout << "correction " << out.blob << "\nlog " << out.log << "\n";
            if (out.diverged) {
                std::cerr << "correction diverged; last finite iterate retained\n";
                return kExitDivergence;
            }
        } else if (cmd_in->parsed()) {
            const std::string dir = flowcal::cmd_infer(cfg, checkpoint_path, correction_path);
            std::cout << "inference bundle written to " << dir << "\n";
        } else if (cmd_ve->parsed()) {
            const flowcal::VerifyOutputs out = flowcal::cmd_verify(cfg, checkpoint_path);
            std::cout << "sweep table " << out.csv << "\n";
            if (!out.passed) return kExitTrend;
        } else if (cmd_or->parsed()) {
            if (!flowcal::cmd_oracle_check(cfg)) return 1;
        }
        return kExitOk;
    } catch (const flowcal::DivergenceError& e) {
        std::cerr << "numerical divergence: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const flowcal::ValidationError& e) {
        std::cerr << "invalid input: " << e.what() << "\n";
        return kExitValidation;
    } catch (const flowcal::IoError& e) {
        std::cerr << "i/o failure: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
