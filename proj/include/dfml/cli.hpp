#pragma once
// Argument handling and stage dispatch. Kept out of tools/ so tests can call
// run_cli in-process and assert on exit codes.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "pipeline.hpp"

namespace dfml {

// Exit contract: 0 success, 1 validation problem, 2 numeric failure.
inline int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"data-free meta-learning pipeline"};
    app.require_subcommand(1);

    std::string config_path, output_flag, seed_flag;
    std::vector<std::string> sets;
    app.add_option("--config", config_path, "TOML config file")->type_name("PATH");
    app.add_option("--set", sets, "override section.key=value (repeatable)")->type_size(1)->type_name("K=V");
    app.add_option("--output", output_flag, "artifact directory (beats DFML_OUTPUT_DIR and config)")
        ->type_name("DIR");
    app.add_option("--seed", seed_flag, "root seed (beats config)")->type_name("N");

    static const std::vector<std::pair<std::string, std::string>> stages = {
        {"zoo-build", "pretrain the model pool"},
        {"invert", "recover one pseudo-task per pool model"},
        {"embed", "diagonal-information task embeddings under the frozen probe"},
        {"group", "dissimilarity matrix and spectral partition"},
        {"train", "grouped episodic training"},
        {"eval", "meta-test evaluation report"},
        {"ag", "per-auxiliary accuracy gain"},
        {"plot", "heatmaps and training curves"},
        {"all", "zoo-build through eval in order"},
    };
    // options may be given after the stage name; let them fall back to the app
    for (const auto& [name, desc] : stages) app.add_subcommand(name, desc)->fallthrough();

    std::vector<const char*> argv;
    argv.push_back("dfml");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(int(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        int r = app.exit(e);
        return r == 0 ? 0 : 1;
    }
    std::string cmd = app.get_subcommands().front()->get_name();

    try {
        TomlTable table;
        if (!config_path.empty()) table = parse_toml(read_file(config_path));
        for (const auto& kv : sets) apply_override(table, kv);
        RunConfig cfg = resolve_config(table);
        if (!seed_flag.empty()) {
            cfg.seed = uint64_t(detail::cfg_int(seed_flag, "--seed"));
            cfg.seed_set = true;
        }
        if (!output_flag.empty())
            cfg.output_dir = output_flag;
        else if (const char* env = std::getenv("DFML_OUTPUT_DIR"); env && *env)
            cfg.output_dir = env;
        cfg.validate();

        const std::string& out = cfg.output_dir;
        std::filesystem::create_directories(out);
        atomic_write(out + "/config.resolved.toml", render_toml(cfg));

        auto announce = [&](const std::string& s) { std::cout << "[" << s << "] done -> " << out << "\n"; };
        if (cmd == "zoo-build" || cmd == "all") {
            stage_zoo(cfg, out);
            announce("zoo-build");
        }
        if (cmd == "invert" || cmd == "all") {
            stage_invert(cfg, out);
            announce("invert");
        }
        if (cmd == "embed" || cmd == "all") {
            stage_embed(cfg, out);
            announce("embed");
        }
        if (cmd == "group" || cmd == "all") {
            stage_group(cfg, out);
            announce("group");
        }
        if (cmd == "train" || cmd == "all") {
            stage_train(cfg, out);
            announce("train");
        }
        if (cmd == "eval" || cmd == "all") {
            stage_eval(cfg, out);
            announce("eval");
        }
        if (cmd == "ag") {
            stage_ag(cfg, out);
            announce("ag");
        }
        if (cmd == "plot") {
            stage_plot(cfg, out);
            announce("plot");
        }
        return 0;
    } catch (const NumericFailure& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace dfml
