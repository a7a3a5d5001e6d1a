// SPDX-License-Identifier: Apache-2.0
//
// magical: command-line front end for probing, training, evaluation and the
// analysis harnesses. Run `magical <subcommand> --help` for the flags.

#include <iostream>

#include "CLI11.hpp"
#include "magical/experiments.hpp"

using namespace magical;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::string> recommender;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "run configuration (JSON)");
    cmd->add_option("--seed", c.seed, "override the configured seed");
    cmd->add_option("--out", c.out, "output directory (used as given)");
    cmd->add_option("--recommender", c.recommender, "oracle | sim:<p> | exec:<command>");
}

RunConfig resolve_config(const Common& c) {
    RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
    if (c.seed) cfg.seed = *c.seed;
    if (c.recommender) cfg.recommender = *c.recommender;
    return cfg;
}

/// Seed and recommender of a training run, with command-line overrides.
RunConfig checkpoint_config(const std::string& checkpoint, const Common& c) {
    RunConfig cfg = parse_run_config(ojson::parse(read_text((fs::path(checkpoint) / "config.json").string())));
    if (c.seed) cfg.seed = *c.seed;
    if (c.recommender) cfg.recommender = *c.recommender;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Expert-to-lay generation with shared-projection multi-branch adapters"};
    app.require_subcommand(1);

    Common common;
    std::string probe_report, resume, checkpoint, compare, text, style;
    std::optional<std::size_t> max_steps;
    bool gold = false;

    auto* probe = app.add_subcommand("probe", "probe every layer and select the semantic layers");
    add_common(probe, common);

    auto* train = app.add_subcommand("train", "train the adapter (writes a run directory)");
    add_common(train, common);
    train->add_option("--probe", probe_report, "probe report selecting the contrastive layers");
    train->add_option("--resume", resume, "resume from an earlier run directory");
    train->add_option("--max-steps", max_steps, "stop after this many steps (resumable)");

    auto* evaluate = app.add_subcommand("evaluate", "generate for the test split and score");
    add_common(evaluate, common);
    evaluate->add_option("--checkpoint", checkpoint, "training run directory")->required();
    evaluate->add_flag("--gold", gold, "score the gold lay texts against themselves");

    auto* generate = app.add_subcommand("generate", "rewrite one expert text");
    add_common(generate, common);
    generate->add_option("--checkpoint", checkpoint, "training run directory")->required();
    generate->add_option("--text", text, "expert text")->required();
    generate->add_option("--style", style, "target style (otherwise asks an exec: recommender)");

    auto* analyze = app.add_subcommand("analyze", "subspace clouds, cross-correlation, similarity, confusion");
    add_common(analyze, common);
    analyze->add_option("--checkpoint", checkpoint, "training run directory")->required();
    analyze->add_option("--compare", compare, "second run directory, usually trained without the constraint");

    auto* sweep = app.add_subcommand("sweep", "train and evaluate over sweep.values of sweep.axis");
    add_common(sweep, common);
    sweep->add_option("--probe", probe_report, "probe report selecting the contrastive layers");

    auto* paramcount = app.add_subcommand("paramcount", "trainable parameter counts per scheme");
    add_common(paramcount, common);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        requested_threads();  // validates MAGICAL_THREADS early
        if (probe->parsed()) {
            const auto cfg = resolve_config(common);
            RunDir run(resolve_run_dir(common.out, cfg, "probe"), "probe", cfg);
            const auto report = cmd_probe(cfg, run);
            std::cout << report.to_tsv();
            std::cerr << "wrote " << run.path().string() << "\n";
        } else if (train->parsed()) {
            const auto cfg = resolve_config(common);
            TrainOptions opt;
            if (!probe_report.empty()) opt.probe_report = probe_report;
            if (!resume.empty()) opt.resume = resume;
            opt.stop_after = max_steps;
            RunDir run(resolve_run_dir(common.out, cfg, "train"), "train", cfg);
            const auto log = cmd_train(cfg, run, opt);
            if (!log.rows.empty()) {
                std::cout << "steps " << log.rows.back().step + 1 << " lm_loss " << num(log.rows.front().lm_loss)
                          << " -> " << num(log.rows.back().lm_loss) << "\n";
            }
            std::cerr << "wrote " << run.path().string() << "\n";
        } else if (evaluate->parsed()) {
            const auto cfg = checkpoint_config(checkpoint, common);
            RunDir run(resolve_run_dir(common.out, cfg, "evaluate"), "evaluate", cfg);
            std::cout << cmd_evaluate(checkpoint, run, {cfg.recommender, gold}).to_tsv();
            std::cerr << "wrote " << run.path().string() << "\n";
        } else if (generate->parsed()) {
            const auto cfg = checkpoint_config(checkpoint, common);
            std::cout << cmd_generate(checkpoint, text, style, cfg.recommender) << "\n";
        } else if (analyze->parsed()) {
            const auto cfg = checkpoint_config(checkpoint, common);
            RunDir run(resolve_run_dir(common.out, cfg, "analyze"), "analyze", cfg);
            std::optional<fs::path> cmp;
            if (!compare.empty()) cmp = compare;
            cmd_analyze(checkpoint, cmp, run, cfg.recommender, std::cerr);
            std::cout << read_text((run.path() / "similarity.tsv").string());
            std::cerr << "wrote " << run.path().string() << "\n";
        } else if (sweep->parsed()) {
            const auto cfg = resolve_config(common);
            RunDir run(resolve_run_dir(common.out, cfg, "sweep"), "sweep", cfg);
            std::optional<std::string> report;
            if (!probe_report.empty()) report = probe_report;
            std::cout << cmd_sweep(cfg, run, report).to_tsv();
            std::cerr << "wrote " << run.path().string() << "\n";
        } else if (paramcount->parsed()) {
            const auto cfg = resolve_config(common);
            RunDir run(resolve_run_dir(common.out, cfg, "paramcount"), "paramcount", cfg);
            std::cout << cmd_paramcount(cfg, run).to_tsv();
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
