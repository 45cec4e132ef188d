// hetlab: case-study quantification, heterogeneity matrices, and dynamic
// parameter-sharing training runs from one binary.
//
// Exit codes: 0 success, 2 usage, 3 data/structural error, 4 numeric error.

#include <CLI11.hpp>

#include "hetlab/runs.hpp"

using namespace hetlab;

namespace {

nlohmann::json load_config_file(const std::string& path) {
    nlohmann::json j = nlohmann::json::parse(read_file(path));
    // accept a previously emitted manifest directly
    if (j.contains("config"))
        return j["config"];
    return j;
}

int run_casestudy(const std::string& variant, const std::string& out, uint64_t seed,
                  const std::string& config_path, int episodes, bool seed_set) {
    SpreadConfig scenario = SpreadConfig::named(variant);
    DistanceConfig dist;
    if (!config_path.empty()) {
        nlohmann::json j = load_config_file(config_path);
        if (j.contains("scenario"))
            scenario = spread_config_from_json(j["scenario"]);
        if (j.contains("dist"))
            dist = distance_config_from_json(j["dist"]);
        if (j.contains("episodes"))
            episodes = j["episodes"].get<int>();
        if (!seed_set && j.contains("seed"))
            seed = j["seed"].get<uint64_t>();
    }
    if (scenario.kind == ScenarioKind::Pms)
        throw StructuralError("casestudy expects a case-study variant (base, v1..v6)");
    RunWriter writer(out);
    CasestudyResult res = casestudy_run(scenario, dist, seed, &writer, episodes);
    nlohmann::json cfgj;
    cfgj["scenario"] = to_json(scenario);
    cfgj["dist"] = to_json(dist);
    cfgj["episodes"] = episodes;
    cfgj["seed"] = seed;
    writer.finish("casestudy", cfgj, seed);
    for (const auto& [name, dm] : res.matrices) {
        const auto bm = group_block_means(dm, groups_of_config(scenario));
        std::printf("%-10s within-group %.6f  cross-group %.6f\n", name.c_str(), bm.within,
                    bm.cross);
    }
    return 0;
}

int run_quantify(const std::string& kind_str, const std::string& scenario_name,
                 const std::string& out, uint64_t seed, const std::string& checkpoint,
                 const std::string& config_path, int episodes, bool seed_set) {
    SpreadConfig scenario = SpreadConfig::named(scenario_name);
    DistanceConfig dist;
    if (!config_path.empty()) {
        nlohmann::json j = load_config_file(config_path);
        if (j.contains("scenario"))
            scenario = spread_config_from_json(j["scenario"]);
        if (j.contains("dist"))
            dist = distance_config_from_json(j["dist"]);
        if (j.contains("episodes"))
            episodes = j["episodes"].get<int>();
        if (!seed_set && j.contains("seed"))
            seed = j["seed"].get<uint64_t>();
    }
    const HetKind kind = kind_from_name(kind_str);
    RunWriter writer(out);
    DistanceMatrix dm = quantify_run(kind, scenario, dist, seed, &writer, checkpoint, episodes);
    nlohmann::json cfgj;
    cfgj["scenario"] = to_json(scenario);
    cfgj["dist"] = to_json(dist);
    cfgj["kind"] = kind_str;
    cfgj["episodes"] = episodes;
    cfgj["seed"] = seed;
    if (!checkpoint.empty())
        cfgj["checkpoint"] = checkpoint;
    writer.finish("quantify", cfgj, seed);
    const auto bm = group_block_means(dm, groups_of_config(scenario));
    std::printf("%s: within-group %.6f  cross-group %.6f  max %.6f\n", kind_str.c_str(),
                bm.within, bm.cross, dm.max_entry());
    return 0;
}

int run_quantify_logs(const std::string& logs, const std::string& out, uint64_t seed) {
    RunWriter writer(out);
    DistanceConfig dist;
    auto mats = quantify_logs_run(logs, dist, seed, &writer);
    nlohmann::json cfgj;
    cfgj["logs"] = logs;
    cfgj["dist"] = to_json(dist);
    cfgj["seed"] = seed;
    writer.finish("quantify-logs", cfgj, seed);
    for (const auto& dm : mats)
        std::printf("%s matrix written (%dx%d, M=%d)\n", kind_name(dm.kind), dm.n, dm.n,
                    dm.sample_count);
    return 0;
}

int run_train(const std::string& scenario_name, const std::string& algo, const std::string& out,
              const CLI::App* cmd, uint64_t seed, int quant_period, const std::string& merge_mode,
              const std::string& init, int updates, const std::string& config_path) {
    SpreadConfig scenario = SpreadConfig::named(scenario_name);
    TrainConfig cfg;
    std::string algo_eff = algo;
    if (!config_path.empty()) {
        nlohmann::json j = load_config_file(config_path);
        if (j.contains("scenario"))
            scenario = spread_config_from_json(j["scenario"]);
        if (j.contains("train"))
            cfg = train_config_from_json(j["train"]);
        if (j.contains("algo") && cmd->count("--algo") == 0)
            algo_eff = j["algo"].get<std::string>();
    }
    if (cmd->count("--seed"))
        cfg.seed = seed;
    if (cmd->count("--quant-period"))
        cfg.quant_period = quant_period;
    if (cmd->count("--merge-mode"))
        cfg.merge_mode = merge_mode_from_name(merge_mode);
    if (cmd->count("--init"))
        cfg.init = paradigm_from_name(init);
    if (cmd->count("--updates"))
        cfg.total_updates = updates;

    RunWriter writer(out);
    TrainRunResult res = train_run(scenario, cfg, algo_eff, &writer);
    std::printf("final evaluation reward (mean per agent): %.4f\n", res.final_eval);
    if (!res.final_labels.empty()) {
        std::printf("final clustering:");
        for (int l : res.final_labels)
            std::printf(" %d", l);
        std::printf("\n");
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"heterogeneity quantification and dynamic parameter sharing lab"};
    app.require_subcommand(1);

    std::string variant = "v1", out = "out", scenario = "base", kind = "meta";
    std::string checkpoint, config_path, logs;
    std::string algo = "fps", merge_mode = "majority", init = "fps";
    uint64_t seed = 1;
    int episodes = 640, quant_period = 50, updates = 200;

    auto* cs = app.add_subcommand("casestudy", "five distance matrices for one variant");
    cs->add_option("--variant", variant, "base or v1..v6")->required();
    cs->add_option("--out", out, "output directory")->required();
    cs->add_option("--seed", seed, "run seed");
    cs->add_option("--episodes", episodes, "pool episodes");
    cs->add_option("--config", config_path, "JSON config or manifest");

    auto* qf = app.add_subcommand("quantify", "one heterogeneity distance matrix");
    qf->add_option("--kind", kind, "obs|response|effect|objective|policy|meta")->required();
    qf->add_option("--scenario", scenario, "scenario name (v1..v6, base, 15a_3c, ...)");
    qf->add_option("--out", out, "output directory")->required();
    qf->add_option("--seed", seed, "run seed");
    qf->add_option("--episodes", episodes, "pool episodes");
    qf->add_option("--checkpoint", checkpoint, "checkpoint dir (policy kind)");
    qf->add_option("--config", config_path, "JSON config or manifest");

    auto* ql = app.add_subcommand("quantify-logs", "model-free matrices from a JSONL log");
    ql->add_option("logs", logs, "trajectory log (JSONL)")->required();
    ql->add_option("--out", out, "output directory")->required();
    ql->add_option("--seed", seed, "run seed");

    auto* tr = app.add_subcommand("train", "training run with a sharing paradigm");
    tr->add_option("--scenario", scenario, "scenario name")->required();
    tr->add_option("--algo", algo, "fps|nps|fpsid|hetdps");
    tr->add_option("--out", out, "output directory")->required();
    tr->add_option("--seed", seed, "run seed");
    tr->add_option("--quant-period", quant_period, "updates between quantifications");
    tr->add_option("--merge-mode", merge_mode, "majority|random|average|weighted");
    tr->add_option("--init", init, "initial paradigm for hetdps (fps|nps)");
    tr->add_option("--updates", updates, "total updates");
    tr->add_option("--config", config_path, "JSON config or manifest");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e); // prints help/usage
        return e.get_exit_code() == 0 ? 0 : 2;
    }

    try {
        if (cs->parsed())
            return run_casestudy(variant, out, seed, config_path, episodes, cs->count("--seed"));
        if (qf->parsed())
            return run_quantify(kind, scenario, out, seed, checkpoint, config_path, episodes,
                                qf->count("--seed"));
        if (ql->parsed())
            return run_quantify_logs(logs, out, seed);
        if (tr->parsed())
            return run_train(scenario, algo, out, tr, seed, quant_period, merge_mode, init,
                             updates, config_path);
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 4;
    } catch (const TrajectoryFormatError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const nlohmann::json::exception& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
    return 2;
}
