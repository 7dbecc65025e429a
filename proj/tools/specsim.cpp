// Command-line harness: simulated RL rollouts with adaptive speculative
// decoding, bandit tuning in a synthetic environment, losslessness checks,
// capture-plan memory reports, and coordinator FSM conformance runs.

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "specsim/experiment.hpp"
#include "specsim/model_gen.hpp"

using nlohmann::json;
using namespace specsim;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitCheckFailed = 3;

void print_error(const std::string& type, const std::string& message,
                 const std::string& field = "") {
    json err{{"error", {{"type", type}, {"message", message}}}};
    if (!field.empty()) err["error"]["field"] = field;
    std::cerr << err.dump() << "\n";
}

ExperimentConfig load_config(const std::string& path, std::optional<std::uint64_t> seed_override) {
    ExperimentConfig config;
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw ConfigError("config", "cannot open config file: " + path);
        json doc;
        try {
            in >> doc;
        } catch (const json::exception& e) {
            throw ConfigError("config", std::string("invalid JSON: ") + e.what());
        }
        config = config_from_json(doc);
    }
    if (seed_override) config.seed = *seed_override;
    config.validate();
    return config;
}

int cmd_simulate(const std::string& config_path, std::optional<std::uint64_t> seed,
                 const std::string& out_dir, const std::string& format, bool print_defaults) {
    if (print_defaults) {
        std::cout << config_to_json(ExperimentConfig{}).dump(2) << "\n";
        return kExitOk;
    }
    ExperimentConfig config = load_config(config_path, seed);
    RunReport report = run_experiment(config);
    auto files = emit_report(report, format, out_dir);
    if (format == "csv") {
        // the full document is still useful alongside the tables
        emit_report(report, "json", out_dir);
    }
    std::cout << "aggregate_speedup " << detail::fmt_double(report.aggregate_speedup) << "\n";
    for (const auto& s : report.steps) {
        std::cout << "step " << s.step << " speedup " << detail::fmt_double(s.speedup)
                  << " mean_accept " << detail::fmt_double(s.mean_accept) << " match_rate "
                  << detail::fmt_double(s.match_rate) << "\n";
    }
    std::cout << "report written to " << out_dir << "\n";
    return kExitOk;
}

struct TuneArm {
    double pre = 1.0;
    double post = 1.0;
};

int cmd_tune(double epsilon, int window, int rounds, int swap_round,
             std::vector<std::string> arm_specs, std::uint64_t seed, const std::string& out_dir) {
    std::vector<TuneArm> arms;
    if (arm_specs.empty()) arm_specs = {"1.2:1.2", "1.0:1.0", "0.9:0.9", "0.8:0.8"};
    for (const auto& spec : arm_specs) {
        TuneArm a;
        auto colon = spec.find(':');
        if (colon == std::string::npos) {
            a.pre = a.post = std::stod(spec);
        } else {
            a.pre = std::stod(spec.substr(0, colon));
            a.post = std::stod(spec.substr(colon + 1));
        }
        arms.push_back(a);
    }

    // All arms share tokens_to_verify so they form one candidate set.
    std::vector<SpecStrategy> strategies;
    for (std::size_t i = 0; i < arms.size(); ++i) {
        strategies.push_back(SpecStrategy{4 + static_cast<int>(i), 2, 4});
    }
    BegMabState mab = beg_initialize(strategies, {1}, epsilon, window);
    RngStream rng(seed, 0);
    RngStream noise = rng.fork(1);

    std::vector<std::int64_t> picks(arms.size(), 0);
    std::ostringstream trace;
    trace << "round,arm,reward\n";
    for (int round = 0; round < rounds; ++round) {
        const SpecStrategy& s = beg_select(mab, 1, rng);
        std::size_t arm = 0;
        for (std::size_t i = 0; i < strategies.size(); ++i) {
            if (strategies[i] == s) arm = i;
        }
        picks[arm] += 1;
        double mean = (swap_round > 0 && round >= swap_round) ? arms[arm].post : arms[arm].pre;
        double reward = std::max(1e-6, mean + 0.05 * (2.0 * noise.uniform01() - 1.0));
        // Record formula gives r = 1 * 1 / elapsed for a zero-accept batch
        // of one, so elapsed = 1/reward realizes the synthetic level.
        std::vector<int> accept_lens{0};
        beg_record(mab, s, 1.0 / reward, accept_lens, 1);
        trace << round << ',' << arm << ',' << detail::fmt_double(reward) << "\n";
    }

    json shares = json::array();
    for (std::size_t i = 0; i < picks.size(); ++i) {
        shares.push_back({{"arm", i},
                          {"selections", picks[i]},
                          {"share", static_cast<double>(picks[i]) / rounds}});
    }
    json out{{"rounds", rounds},
             {"swap_round", swap_round},
             {"shares", shares},
             {"state", beg_state_to_json(mab)}};
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        std::ofstream f(out_dir + "/tuner_trace.json", std::ios::binary);
        f << out.dump(2) << "\n";
        std::ofstream c(out_dir + "/selections.csv", std::ios::binary);
        c << trace.str();
    }
    std::cout << out.dump(2) << "\n";
    return kExitOk;
}

int cmd_verify(int num_configs, std::uint64_t seed, int stochastic_samples) {
    int failures = 0;
    RngStream root(seed, 0);

    // greedy losslessness over random configs
    {
        auto strategies = ExperimentConfig::default_strategies();
        int ok = 0;
        for (int c = 0; c < num_configs; ++c) {
            RngStream cfg_rng = root.fork(1000 + static_cast<std::uint64_t>(c));
            int vocab = 4 + static_cast<int>(cfg_rng.uniform_int(13));  // <= 16
            int order = 1 + static_cast<int>(cfg_rng.uniform_int(3));   // <= 3
            auto model = make_random_model(vocab, order, 0.0, 0.3, 0.05, cfg_rng);
            AdaptiveDrafter drafter(vocab, std::max(0, order - 1), 1.0);
            for (int i = 0; i < 200; ++i) {
                TokenSeq ctx;
                for (int m = 0; m < drafter.order(); ++m) {
                    ctx.push_back(static_cast<TokenId>(cfg_rng.uniform_int(
                        static_cast<std::uint64_t>(vocab))));
                }
                drafter.add_count(drafter.context_key(ctx),
                                  static_cast<TokenId>(cfg_rng.uniform_int(
                                      static_cast<std::uint64_t>(vocab))),
                                  1 + cfg_rng.uniform_int(5));
            }
            const SpecStrategy& strategy = strategies[c % strategies.size()];
            TokenSeq prompt{static_cast<TokenId>(2 + cfg_rng.uniform_int(
                static_cast<std::uint64_t>(vocab - 2)))};
            RngStream gen_rng = cfg_rng.fork(1);
            auto reference = generate_autoregressive(model, prompt, 48, gen_rng);
            RngStream spec_rng = cfg_rng.fork(2);
            auto planner = make_adaptive_tree_planner(drafter);
            auto result = spec_generate(model, planner, prompt, 48, strategy,
                                        DecodeMode::GreedyTree, spec_rng);
            if (result.tokens == reference) {
                ++ok;
            } else {
                ++failures;
            }
        }
        std::cout << (ok == num_configs ? "PASS" : "FAIL") << " greedy-losslessness " << ok << "/"
                  << num_configs << " configs token-identical\n";
    }

    // stochastic exact enumeration, order-0 model
    {
        RngStream rng = root.fork(2000);
        auto target = make_random_model(6, 0, 1.0, 0.7, 0.0, rng);
        auto drafter_model = make_random_model(6, 0, 1.0, 0.7, 0.0, rng);
        const auto& p = target.table().begin()->second;
        const auto& q = drafter_model.table().begin()->second;
        double worst = 0.0;
        for (std::size_t t = 0; t < p.probs.size(); ++t) {
            double direct = q.probs[t] * std::min(1.0, p.probs[t] / q.probs[t]);
            double reject_mass = 0.0, residual_sum = 0.0;
            for (std::size_t x = 0; x < p.probs.size(); ++x) {
                reject_mass += q.probs[x] * (1.0 - std::min(1.0, p.probs[x] / q.probs[x]));
                residual_sum += std::max(0.0, p.probs[x] - q.probs[x]);
            }
            double residual_t = std::max(0.0, p.probs[t] - q.probs[t]) /
                                (residual_sum > 0 ? residual_sum : 1.0);
            worst = std::max(worst, std::abs(direct + reject_mass * residual_t - p.probs[t]));
        }
        bool ok = worst < 1e-12;
        failures += !ok;
        std::cout << (ok ? "PASS" : "FAIL")
                  << " stochastic-exact first-token deviation " << worst << "\n";
    }

    // stochastic sampling TV check
    {
        RngStream rng = root.fork(3000);
        auto target = make_random_model(8, 0, 1.0, 0.8, 0.0, rng);
        AdaptiveDrafter drafter(8, 0, 1.0);
        for (int t = 0; t < 8; ++t) {
            drafter.add_count(TokenSeq{}, static_cast<TokenId>(t), 1 + rng.uniform_int(8));
        }
        SpecStrategy chain{4, 1, 4};
        auto planner = make_adaptive_chain_planner(drafter);
        const int positions = 5;
        std::vector<std::vector<std::int64_t>> counts(
            positions, std::vector<std::int64_t>(8, 0));
        RngStream sample_rng = root.fork(3001);
        for (int i = 0; i < stochastic_samples; ++i) {
            RngStream r = sample_rng.fork(static_cast<std::uint64_t>(i));
            auto res = spec_generate(target, planner, TokenSeq{2, 3}, positions, chain,
                                     DecodeMode::StochasticLinear, r);
            for (int pos = 0; pos < positions && pos < static_cast<int>(res.tokens.size());
                 ++pos) {
                counts[static_cast<std::size_t>(pos)]
                      [static_cast<std::size_t>(res.tokens[pos])] += 1;
            }
        }
        const auto& row = target.table().begin()->second;
        double worst_tv = 0.0;
        for (int pos = 0; pos < positions; ++pos) {
            double tv = 0.0;
            for (std::size_t t = 0; t < 8; ++t) {
                tv += std::abs(static_cast<double>(counts[static_cast<std::size_t>(pos)][t]) /
                                   stochastic_samples -
                               row.probs[t]);
            }
            worst_tv = std::max(worst_tv, 0.5 * tv);
        }
        bool ok = worst_tv < 0.01;
        failures += !ok;
        std::cout << (ok ? "PASS" : "FAIL") << " stochastic-sampled worst per-position TV "
                  << worst_tv << " over " << stochastic_samples << " responses\n";
    }

    return failures == 0 ? kExitOk : kExitCheckFailed;
}

std::vector<SpecStrategy> plan_default_strategies() {
    return {SpecStrategy{10, 8, 64}, SpecStrategy{10, 8, 48}, SpecStrategy{10, 8, 32},
            SpecStrategy{10, 8, 16}};
}

int cmd_plan(const std::string& config_path, const std::string& out_dir) {
    std::vector<SpecStrategy> strategies = plan_default_strategies();
    BucketSpec spec{{1, 2, 8, 16}, 32};
    if (!config_path.empty()) {
        ExperimentConfig config = load_config(config_path, std::nullopt);
        std::map<int, SpecStrategy, std::greater<int>> rep;
        for (const auto& s : config.strategies) rep.emplace(s.tokens_to_verify, s);
        strategies.clear();
        for (const auto& [v, s] : rep) strategies.push_back(s);
        spec.thresholds = config.mab.thresholds;
        spec.max_batch = std::max(config.mab.max_capture_batch, config.mab.thresholds.back());
    }
    CapturePlan bucketed = plan_captures(strategies, spec);
    CapturePlan vanilla = plan_captures_vanilla(strategies, spec);
    double ratio = vanilla.total_memory_units / bucketed.total_memory_units;
    json out{{"bucketed", capture_plan_to_json(bucketed)},
             {"vanilla", capture_plan_to_json(vanilla)},
             {"ratio", ratio}};
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        std::ofstream f(out_dir + "/capture_plan.json", std::ios::binary);
        f << out.dump(2) << "\n";
    }
    std::cout << "vanilla_memory_units " << detail::fmt_double(vanilla.total_memory_units)
              << "\n";
    std::cout << "bucketed_memory_units " << detail::fmt_double(bucketed.total_memory_units)
              << "\n";
    std::cout << "ratio " << detail::fmt_double(ratio) << "\n";
    return kExitOk;
}

int cmd_fsm(const std::string& trace_path, int workers, const std::string& dp_groups,
            int idle_threshold) {
    std::vector<WorkerRecord> records;
    std::vector<int> groups;
    if (!dp_groups.empty()) {
        std::stringstream ss(dp_groups);
        std::string item;
        while (std::getline(ss, item, ',')) groups.push_back(std::stoi(item));
    }
    for (int w = 0; w < workers; ++w) {
        int dp = w < static_cast<int>(groups.size()) ? groups[static_cast<std::size_t>(w)] : 0;
        records.push_back(WorkerRecord{w, WorkerState::Busy, dp});
    }
    Coordinator coord(records, idle_threshold);

    std::ifstream in(trace_path);
    if (!in) {
        print_error("config", "cannot open trace file: " + trace_path, "trace");
        return kExitConfig;
    }
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json event;
        try {
            event = json::parse(line);
        } catch (const json::exception& e) {
            print_error("trace", "line " + std::to_string(line_no) + ": " + e.what());
            return kExitConfig;
        }
        try {
            std::string type = event.at("type").get<std::string>();
            std::vector<CoordMessage> actions;
            if (type == "STATE_CHANGE") {
                actions = coord.transition(
                    event.at("worker_id").get<int>(),
                    worker_state_from_name(event.at("payload").at("to").get<std::string>()));
            } else if (type == "ROLLOUT_DONE") {
                actions = coord.rollout_complete();
            } else if (type == "BEGIN_ROLLOUT") {
                coord.begin_rollout();
            } else {
                throw ProtocolError("unknown event type: " + type);
            }
            for (const auto& a : actions) std::cout << a.to_json().dump() << "\n";
        } catch (const ProtocolError& e) {
            print_error("protocol", std::string(e.what()) + " (trace line " +
                                        std::to_string(line_no) + ")");
            return kExitCheckFailed;
        }
    }
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale simulator for adaptive speculative decoding in long-tail RL rollouts"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out", format = "json";
    std::optional<std::uint64_t> seed_override;
    std::uint64_t seed = 42;
    bool print_defaults = false;

    auto* simulate = app.add_subcommand("simulate", "run full simulated RL steps");
    simulate->add_option("--config", config_path, "config JSON path");
    simulate->add_option("--seed", seed_override, "seed override");
    simulate->add_option("--out", out_dir, "output directory");
    simulate->add_option("--format", format, "csv or json")
        ->check(CLI::IsMember({"csv", "json"}));
    simulate->add_flag("--print-defaults", print_defaults, "print the default config and exit");

    double epsilon = 0.1;
    int window = 20, rounds = 2000, swap_round = 0;
    std::vector<std::string> arm_specs;
    auto* tune = app.add_subcommand("tune", "bandit-only synthetic environment");
    tune->add_option("--epsilon", epsilon, "exploration probability");
    tune->add_option("--window", window, "sliding window size");
    tune->add_option("--rounds", rounds, "selection rounds");
    tune->add_option("--swap-round", swap_round, "round at which arm means swap (0 = never)");
    tune->add_option("--arm", arm_specs, "arm reward means, pre:post");
    tune->add_option("--seed", seed, "rng seed");
    tune->add_option("--out", out_dir, "output directory");

    int verify_configs = 50, stochastic_samples = 100000;
    auto* verify = app.add_subcommand("verify", "losslessness suites");
    verify->add_option("--configs", verify_configs, "random greedy configs");
    verify->add_option("--stochastic-samples", stochastic_samples, "sampled responses");
    verify->add_option("--seed", seed, "rng seed");

    std::string plan_out;
    auto* plan = app.add_subcommand("plan", "capture-plan memory report");
    plan->add_option("--config", config_path, "config JSON path");
    plan->add_option("--out", plan_out, "output directory");

    std::string trace_path, dp_groups;
    int fsm_workers = 4, fsm_idle_threshold = 2;
    auto* fsm = app.add_subcommand("fsm", "coordinator conformance on a scripted trace");
    fsm->add_option("--trace", trace_path, "JSON-lines event trace")->required();
    fsm->add_option("--workers", fsm_workers, "worker count");
    fsm->add_option("--dp-groups", dp_groups, "comma-separated dp group per worker");
    fsm->add_option("--idle-threshold", fsm_idle_threshold, "promotion threshold");

    CLI11_PARSE(app, argc, argv);

    try {
        if (simulate->parsed()) {
            return cmd_simulate(config_path, seed_override, out_dir, format, print_defaults);
        }
        if (tune->parsed()) {
            return cmd_tune(epsilon, window, rounds, swap_round, arm_specs, seed, out_dir);
        }
        if (verify->parsed()) {
            return cmd_verify(verify_configs, seed, stochastic_samples);
        }
        if (plan->parsed()) {
            return cmd_plan(config_path, plan_out);
        }
        if (fsm->parsed()) {
            return cmd_fsm(trace_path, fsm_workers, dp_groups, fsm_idle_threshold);
        }
    } catch (const ConfigError& e) {
        print_error("config", e.what(), e.field());
        return kExitConfig;
    } catch (const ProtocolError& e) {
        print_error("protocol", e.what());
        return kExitCheckFailed;
    } catch (const CheckpointError& e) {
        print_error("checkpoint", e.what());
        return kExitCheckFailed;
    } catch (const std::exception& e) {
        print_error("internal", e.what());
        return 1;
    }
    return kExitOk;
}
