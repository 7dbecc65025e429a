#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "specsim/capture_plan.hpp"
#include "specsim/coordinator.hpp"
#include "specsim/cost_model.hpp"
#include "specsim/data_buffer.hpp"
#include "specsim/model_gen.hpp"
#include "specsim/rollout.hpp"
#include "specsim/spot_trainer.hpp"

#include <json.hpp>

namespace specsim {

/// Everything one simulated RL training run needs. Defaults reproduce the
/// calibrated trends; every knob is printable via default_config_json().
struct ExperimentConfig {
    std::uint64_t seed = 42;
    int rl_steps = 4;
    int vocab_size = 32;
    double drift_lambda = 0.3;
    int elastic_threshold = 32;
    DecodeMode mode = DecodeMode::GreedyTree;

    struct Target {
        int order = 2;
        double temperature = 0.0;
        int base_order = 1;
        double base_concentration = 0.05;
        double structure_mix = 0.8;
        double dev_concentration = 0.5;
        double eos_weight = 0.0;
    } target;

    struct Drafter {
        int order = 1;
        double smoothing_alpha = 1.0;
        int pretrain_transitions = 20000;
        bool adaptive_training = true;
        std::int64_t staleness_bound = 1;
    } drafter;

    struct Ngram {
        int n = 2;
        int continuation_len = 8;
    } ngram;

    std::vector<SpecStrategy> strategies = default_strategies();

    struct Mab {
        double epsilon = 0.1;
        int window = 20;
        std::vector<int> thresholds = {1, 2, 8, 16};
        int max_capture_batch = 32;
    } mab;

    CostModelParams cost;
    std::map<int, double> calibration_emitted = CalibrationProfile::defaults().mean_emitted;

    struct Workload {
        double mu = 5.2; // log-space mean; exp(mu) ~ 180 tokens median
        double sigma = 1.0;
        int max_len = 1024;
        int requests_per_step = 64;
        int prompt_len = 2;
    } workload;

    struct Workers {
        int count = 8;
        int idle_threshold = 2;
        double iteration_cost = 2.0; // time-units per training iteration
        std::size_t token_budget = 8192;
        std::size_t pack_capacity = 8192;
    } workers;

    static std::vector<SpecStrategy> default_strategies() {
        std::vector<SpecStrategy> out;
        for (int verify : {64, 48, 32, 16}) {
            for (int depth : {10, 6}) {
                out.push_back(SpecStrategy{depth, 8, verify});
            }
        }
        return out;
    }

    void validate() const;
};

// --- config <-> json ----------------------------------------------------

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& path,
                       std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError(path, "must be an object");
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) {
            if (key == a) { ok = true; break; }
        }
        if (!ok) throw ConfigError(path.empty() ? key : path + "." + key, "unknown key");
    }
}

template <typename T>
T get_field(const nlohmann::json& j, const std::string& path, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(path.empty() ? key : path + "." + key, "wrong type");
    }
}

} // namespace detail

inline void ExperimentConfig::validate() const {
    if (rl_steps < 1) throw ConfigError("rl_steps", "must be >= 1");
    if (vocab_size < 4) throw ConfigError("vocab_size", "must be >= 4");
    if (drift_lambda < 0.0 || drift_lambda > 1.0)
        throw ConfigError("drift_lambda", "must be in [0, 1]");
    if (elastic_threshold < 1) throw ConfigError("elastic_threshold", "must be >= 1");
    if (target.order < 0) throw ConfigError("target.order", "must be >= 0");
    if (target.temperature < 0.0) throw ConfigError("target.temperature", "must be >= 0");
    if (mode == DecodeMode::StochasticLinear && target.temperature <= 0.0)
        throw ConfigError("mode", "stochastic_linear requires target.temperature > 0");
    if (target.base_order < 0 || target.base_order > target.order)
        throw ConfigError("target.base_order", "must be in [0, target.order]");
    if (target.structure_mix < 0.0 || target.structure_mix > 1.0)
        throw ConfigError("target.structure_mix", "must be in [0, 1]");
    if (target.eos_weight < 0.0 || target.eos_weight >= 1.0)
        throw ConfigError("target.eos_weight", "must be in [0, 1)");
    if (drafter.order < 0) throw ConfigError("drafter.order", "must be >= 0");
    if (drafter.smoothing_alpha < 0.0)
        throw ConfigError("drafter.smoothing_alpha", "must be >= 0");
    if (drafter.pretrain_transitions < 0)
        throw ConfigError("drafter.pretrain_transitions", "must be >= 0");
    if (drafter.staleness_bound < 0)
        throw ConfigError("drafter.staleness_bound", "must be >= 0");
    if (ngram.n < 1) throw ConfigError("ngram.n", "must be >= 1");
    if (ngram.continuation_len < 1) throw ConfigError("ngram.continuation_len", "must be >= 1");
    if (strategies.empty()) throw ConfigError("strategies", "must not be empty");
    for (const auto& s : strategies) s.validate();
    if (mab.epsilon < 0.0 || mab.epsilon > 1.0) throw ConfigError("mab.epsilon", "must be in [0, 1]");
    if (mab.window < 1) throw ConfigError("mab.window", "must be >= 1");
    cost.validate();
    if (workload.sigma < 0.0) throw ConfigError("workload.sigma", "must be >= 0");
    if (workload.max_len < 1) throw ConfigError("workload.max_len", "must be >= 1");
    if (workload.requests_per_step < 1)
        throw ConfigError("workload.requests_per_step", "must be >= 1");
    if (workload.prompt_len < 1) throw ConfigError("workload.prompt_len", "must be >= 1");
    if (workers.count < 1) throw ConfigError("workers.count", "must be >= 1");
    if (workers.idle_threshold < 1) throw ConfigError("workers.idle_threshold", "must be >= 1");
    if (!(workers.iteration_cost > 0.0))
        throw ConfigError("workers.iteration_cost", "must be > 0");
    if (workers.token_budget < 1) throw ConfigError("workers.token_budget", "must be >= 1");
    if (workers.pack_capacity < 1) throw ConfigError("workers.pack_capacity", "must be >= 1");
    // group/threshold consistency is what beg_initialize enforces; fail early
    (void)beg_initialize(strategies, mab.thresholds, mab.epsilon, mab.window);
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
    nlohmann::json strategies = nlohmann::json::array();
    for (const auto& s : c.strategies) {
        strategies.push_back({{"draft_depth", s.draft_depth},
                              {"top_k", s.top_k},
                              {"tokens_to_verify", s.tokens_to_verify}});
    }
    nlohmann::json calibration = nlohmann::json::object();
    for (const auto& [verify, emitted] : c.calibration_emitted) {
        calibration[std::to_string(verify)] = emitted;
    }
    return {
        {"seed", c.seed},
        {"rl_steps", c.rl_steps},
        {"vocab_size", c.vocab_size},
        {"drift_lambda", c.drift_lambda},
        {"elastic_threshold", c.elastic_threshold},
        {"mode", c.mode == DecodeMode::GreedyTree ? "greedy_tree" : "stochastic_linear"},
        {"target",
         {{"order", c.target.order},
          {"temperature", c.target.temperature},
          {"base_order", c.target.base_order},
          {"base_concentration", c.target.base_concentration},
          {"structure_mix", c.target.structure_mix},
          {"dev_concentration", c.target.dev_concentration},
          {"eos_weight", c.target.eos_weight}}},
        {"drafter",
         {{"order", c.drafter.order},
          {"smoothing_alpha", c.drafter.smoothing_alpha},
          {"pretrain_transitions", c.drafter.pretrain_transitions},
          {"adaptive_training", c.drafter.adaptive_training},
          {"staleness_bound", c.drafter.staleness_bound}}},
        {"ngram", {{"n", c.ngram.n}, {"continuation_len", c.ngram.continuation_len}}},
        {"strategies", std::move(strategies)},
        {"mab",
         {{"epsilon", c.mab.epsilon},
          {"window", c.mab.window},
          {"thresholds", c.mab.thresholds},
          {"max_capture_batch", c.mab.max_capture_batch}}},
        {"cost_model",
         {{"t_launch", c.cost.t_launch},
          {"model_bytes", c.cost.model_bytes},
          {"mem_bw", c.cost.mem_bw},
          {"flops_per_token", c.cost.flops_per_token},
          {"peak_flops", c.cost.peak_flops},
          {"drafter_step_cost", c.cost.drafter_step_cost}}},
        {"calibration", {{"mean_emitted", std::move(calibration)}}},
        {"workload",
         {{"mu", c.workload.mu},
          {"sigma", c.workload.sigma},
          {"max_len", c.workload.max_len},
          {"requests_per_step", c.workload.requests_per_step},
          {"prompt_len", c.workload.prompt_len}}},
        {"workers",
         {{"count", c.workers.count},
          {"idle_threshold", c.workers.idle_threshold},
          {"iteration_cost", c.workers.iteration_cost},
          {"token_budget", c.workers.token_budget},
          {"pack_capacity", c.workers.pack_capacity}}},
    };
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    using detail::check_keys;
    using detail::get_field;
    ExperimentConfig c;
    check_keys(j, "",
               {"seed", "rl_steps", "vocab_size", "drift_lambda", "elastic_threshold", "mode",
                "target", "drafter", "ngram", "strategies", "mab", "cost_model", "calibration",
                "workload", "workers"});
    c.seed = get_field<std::uint64_t>(j, "", "seed", c.seed);
    c.rl_steps = get_field<int>(j, "", "rl_steps", c.rl_steps);
    c.vocab_size = get_field<int>(j, "", "vocab_size", c.vocab_size);
    c.drift_lambda = get_field<double>(j, "", "drift_lambda", c.drift_lambda);
    c.elastic_threshold = get_field<int>(j, "", "elastic_threshold", c.elastic_threshold);
    if (j.contains("mode")) {
        std::string mode = j.at("mode").get<std::string>();
        if (mode == "greedy_tree") c.mode = DecodeMode::GreedyTree;
        else if (mode == "stochastic_linear") c.mode = DecodeMode::StochasticLinear;
        else throw ConfigError("mode", "must be greedy_tree or stochastic_linear");
    }
    if (j.contains("target")) {
        const auto& t = j.at("target");
        check_keys(t, "target",
                   {"order", "temperature", "base_order", "base_concentration", "structure_mix",
                    "dev_concentration", "eos_weight"});
        c.target.order = get_field<int>(t, "target", "order", c.target.order);
        c.target.temperature = get_field<double>(t, "target", "temperature", c.target.temperature);
        c.target.base_order = get_field<int>(t, "target", "base_order", c.target.base_order);
        c.target.base_concentration =
            get_field<double>(t, "target", "base_concentration", c.target.base_concentration);
        c.target.structure_mix =
            get_field<double>(t, "target", "structure_mix", c.target.structure_mix);
        c.target.dev_concentration =
            get_field<double>(t, "target", "dev_concentration", c.target.dev_concentration);
        c.target.eos_weight = get_field<double>(t, "target", "eos_weight", c.target.eos_weight);
    }
    if (j.contains("drafter")) {
        const auto& d = j.at("drafter");
        check_keys(d, "drafter",
                   {"order", "smoothing_alpha", "pretrain_transitions", "adaptive_training",
                    "staleness_bound"});
        c.drafter.order = get_field<int>(d, "drafter", "order", c.drafter.order);
        c.drafter.smoothing_alpha =
            get_field<double>(d, "drafter", "smoothing_alpha", c.drafter.smoothing_alpha);
        c.drafter.pretrain_transitions =
            get_field<int>(d, "drafter", "pretrain_transitions", c.drafter.pretrain_transitions);
        c.drafter.adaptive_training =
            get_field<bool>(d, "drafter", "adaptive_training", c.drafter.adaptive_training);
        c.drafter.staleness_bound =
            get_field<std::int64_t>(d, "drafter", "staleness_bound", c.drafter.staleness_bound);
    }
    if (j.contains("ngram")) {
        const auto& n = j.at("ngram");
        check_keys(n, "ngram", {"n", "continuation_len"});
        c.ngram.n = get_field<int>(n, "ngram", "n", c.ngram.n);
        c.ngram.continuation_len =
            get_field<int>(n, "ngram", "continuation_len", c.ngram.continuation_len);
    }
    if (j.contains("strategies")) {
        if (!j.at("strategies").is_array()) throw ConfigError("strategies", "must be an array");
        c.strategies.clear();
        std::size_t i = 0;
        for (const auto& s : j.at("strategies")) {
            std::string path = "strategies[" + std::to_string(i++) + "]";
            check_keys(s, path, {"draft_depth", "top_k", "tokens_to_verify"});
            SpecStrategy st;
            st.draft_depth = get_field<int>(s, path, "draft_depth", st.draft_depth);
            st.top_k = get_field<int>(s, path, "top_k", st.top_k);
            st.tokens_to_verify = get_field<int>(s, path, "tokens_to_verify", st.tokens_to_verify);
            c.strategies.push_back(st);
        }
    }
    if (j.contains("mab")) {
        const auto& m = j.at("mab");
        check_keys(m, "mab", {"epsilon", "window", "thresholds", "max_capture_batch"});
        c.mab.epsilon = get_field<double>(m, "mab", "epsilon", c.mab.epsilon);
        c.mab.window = get_field<int>(m, "mab", "window", c.mab.window);
        c.mab.thresholds = get_field<std::vector<int>>(m, "mab", "thresholds", c.mab.thresholds);
        c.mab.max_capture_batch =
            get_field<int>(m, "mab", "max_capture_batch", c.mab.max_capture_batch);
    }
    if (j.contains("cost_model")) {
        const auto& k = j.at("cost_model");
        check_keys(k, "cost_model",
                   {"t_launch", "model_bytes", "mem_bw", "flops_per_token", "peak_flops",
                    "drafter_step_cost"});
        c.cost.t_launch = get_field<double>(k, "cost_model", "t_launch", c.cost.t_launch);
        c.cost.model_bytes = get_field<double>(k, "cost_model", "model_bytes", c.cost.model_bytes);
        c.cost.mem_bw = get_field<double>(k, "cost_model", "mem_bw", c.cost.mem_bw);
        c.cost.flops_per_token =
            get_field<double>(k, "cost_model", "flops_per_token", c.cost.flops_per_token);
        c.cost.peak_flops = get_field<double>(k, "cost_model", "peak_flops", c.cost.peak_flops);
        c.cost.drafter_step_cost =
            get_field<double>(k, "cost_model", "drafter_step_cost", c.cost.drafter_step_cost);
    }
    if (j.contains("calibration")) {
        const auto& k = j.at("calibration");
        check_keys(k, "calibration", {"mean_emitted"});
        if (k.contains("mean_emitted")) {
            if (!k.at("mean_emitted").is_object())
                throw ConfigError("calibration.mean_emitted", "must be an object");
            c.calibration_emitted.clear();
            for (const auto& [key, value] : k.at("mean_emitted").items()) {
                try {
                    c.calibration_emitted[std::stoi(key)] = value.get<double>();
                } catch (const std::exception&) {
                    throw ConfigError("calibration.mean_emitted." + key, "invalid entry");
                }
            }
        }
    }
    if (j.contains("workload")) {
        const auto& w = j.at("workload");
        check_keys(w, "workload", {"mu", "sigma", "max_len", "requests_per_step", "prompt_len"});
        c.workload.mu = get_field<double>(w, "workload", "mu", c.workload.mu);
        c.workload.sigma = get_field<double>(w, "workload", "sigma", c.workload.sigma);
        c.workload.max_len = get_field<int>(w, "workload", "max_len", c.workload.max_len);
        c.workload.requests_per_step =
            get_field<int>(w, "workload", "requests_per_step", c.workload.requests_per_step);
        c.workload.prompt_len = get_field<int>(w, "workload", "prompt_len", c.workload.prompt_len);
    }
    if (j.contains("workers")) {
        const auto& w = j.at("workers");
        check_keys(w, "workers",
                   {"count", "idle_threshold", "iteration_cost", "token_budget", "pack_capacity"});
        c.workers.count = get_field<int>(w, "workers", "count", c.workers.count);
        c.workers.idle_threshold =
            get_field<int>(w, "workers", "idle_threshold", c.workers.idle_threshold);
        c.workers.iteration_cost =
            get_field<double>(w, "workers", "iteration_cost", c.workers.iteration_cost);
        c.workers.token_budget =
            get_field<std::size_t>(w, "workers", "token_budget", c.workers.token_budget);
        c.workers.pack_capacity =
            get_field<std::size_t>(w, "workers", "pack_capacity", c.workers.pack_capacity);
    }
    c.validate();
    return c;
}

// --- run report -----------------------------------------------------------

struct StepReport {
    int step = 0;
    double baseline_time = 0.0;
    double tlt_time = 0.0;
    double speedup = 0.0;
    double mean_len = 0.0;
    int p50_len = 0;
    int p75_len = 0;
    int max_len = 0;
    double mean_accept = 0.0;
    std::int64_t sd_steps = 0;
    std::int64_t plain_steps = 0;
    std::int64_t verify_events = 0;
    std::int64_t ngram_verify_events = 0;
    std::int64_t drafter_version = 0;
    double match_rate = 0.0;
    bool snapshot_published = false;
    int training_iterations = 0;
    std::map<std::string, std::int64_t> coord_events;
    std::vector<std::int64_t> mab_selections; // cumulative, per declared strategy
};

struct RunReport {
    nlohmann::json config_echo;
    std::vector<StepReport> steps;
    double aggregate_speedup = 0.0;
    std::vector<double> accept_rate_by_position;
    nlohmann::json mab_state;
    nlohmann::json capture_comparison;
    nlohmann::json model_doc;
    struct SpeedupPoint {
        int batch;
        int tokens_to_verify;
        double speedup;
    };
    std::vector<SpeedupPoint> speedup_curve;
};

namespace detail {

inline int percentile(std::vector<int> values, double q) {
    if (values.empty()) return 0;
    std::sort(values.begin(), values.end());
    std::size_t rank = static_cast<std::size_t>(
        std::ceil(q * static_cast<double>(values.size())));
    if (rank == 0) rank = 1;
    return values[std::min(rank - 1, values.size() - 1)];
}

inline std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

} // namespace detail

/// One simulated RL training run: per step, draw the long-tail workload,
/// roll it out with and without the adaptive engine on the same seed,
/// harvest idle workers for spot drafter training, then drift the target.
inline RunReport run_experiment(const ExperimentConfig& config) {
    config.validate();
    RngStream root(config.seed, 0);

    ModelGenParams gen;
    gen.vocab_size = config.vocab_size;
    gen.order = config.target.order;
    gen.temperature = config.target.temperature;
    gen.base_order = config.target.base_order;
    gen.base_concentration = config.target.base_concentration;
    gen.structure_mix = config.target.structure_mix;
    gen.dev_concentration = config.target.dev_concentration;
    gen.eos_weight = config.target.eos_weight;
    RngStream model_rng = root.fork(1);
    MarkovTargetModel model = make_structured_model(gen, model_rng);

    RunReport report;
    report.config_echo = config_to_json(config);
    report.model_doc = model_to_json(model);

    auto random_prompt = [&](RngStream& r) {
        TokenSeq p(static_cast<std::size_t>(config.workload.prompt_len));
        for (auto& t : p) {
            t = static_cast<TokenId>(2 + r.uniform_int(
                    static_cast<std::uint64_t>(config.vocab_size - 2)));
        }
        return p;
    };

    auto train_stream = [&](const RolloutRequest& r) {
        TokenSeq s = r.prompt;
        s.insert(s.end(), r.generated.begin(), r.generated.end());
        return s;
    };

    // Pretrain the drafter on tempered walks of the initial target.
    AdaptiveDrafter drafter(config.vocab_size, config.drafter.order,
                            config.drafter.smoothing_alpha);
    {
        RngStream pre_rng = root.fork(2);
        MarkovTargetModel sampler = model.with_temperature(1.0);
        std::vector<TokenSeq> walks;
        int produced = 0;
        while (produced < config.drafter.pretrain_transitions) {
            TokenSeq prompt = random_prompt(pre_rng);
            TokenSeq gen_tokens = generate_autoregressive(sampler, prompt, 128, pre_rng);
            TokenSeq stream = prompt;
            stream.insert(stream.end(), gen_tokens.begin(), gen_tokens.end());
            produced += static_cast<int>(stream.size());
            walks.push_back(std::move(stream));
            if (gen_tokens.empty()) break;
        }
        if (!walks.empty() && config.drafter.pretrain_transitions > 0) {
            drafter = train_on_batch(
                drafter, pack_sequences(walks, config.workers.pack_capacity));
        }
    }
    DrafterSnapshot published{drafter, model.step_id()};

    BegMabState mab = beg_initialize(config.strategies, config.mab.thresholds,
                                     config.mab.epsilon, config.mab.window);
    DataBuffer buffer(1);
    std::vector<WorkerRecord> worker_records;
    for (int w = 0; w < config.workers.count; ++w) {
        worker_records.push_back(WorkerRecord{w, WorkerState::Busy, 0});
    }
    Coordinator coordinator(worker_records, config.workers.idle_threshold);
    RngStream drift_rng = root.fork(3);

    double total_baseline = 0.0;
    double total_tlt = 0.0;
    std::vector<std::int64_t> accept_at_least;
    std::int64_t total_verify_events = 0;

    for (int step = 0; step < config.rl_steps; ++step) {
        RngStream len_rng = root.fork(100 + static_cast<std::uint64_t>(step));
        RngStream prompt_rng = root.fork(200 + static_cast<std::uint64_t>(step));
        std::vector<RolloutRequest> requests;
        for (int i = 0; i < config.workload.requests_per_step; ++i) {
            RolloutRequest r;
            r.request_id = i;
            r.prompt = random_prompt(prompt_rng);
            r.max_len = sample_response_length(config.workload.mu, config.workload.sigma,
                                               config.workload.max_len, len_rng);
            requests.push_back(std::move(r));
        }

        RolloutConfig base_cfg;
        base_cfg.enable_sd = false;
        base_cfg.mode = config.mode;
        RngStream base_rng = root.fork(300 + static_cast<std::uint64_t>(step));
        RolloutResult baseline =
            run_rollout(requests, model, std::nullopt, nullptr, config.cost, base_cfg, base_rng);

        RolloutConfig tlt_cfg;
        tlt_cfg.enable_sd = true;
        tlt_cfg.elastic_threshold = config.elastic_threshold;
        tlt_cfg.mode = config.mode;
        tlt_cfg.drafter_staleness_bound = config.drafter.staleness_bound;
        tlt_cfg.ngram_n = config.ngram.n;
        tlt_cfg.ngram_continuation_len = config.ngram.continuation_len;
        RngStream tlt_rng = root.fork(400 + static_cast<std::uint64_t>(step));
        RolloutResult tlt = run_rollout(requests, model, published, &mab, config.cost, tlt_cfg,
                                        tlt_rng);

        // Coordinator replay: workers go idle as their request share
        // finishes; the first promotion opens the training window.
        std::size_t log_before = coordinator.event_log().size();
        coordinator.begin_rollout();
        std::vector<std::pair<double, int>> worker_finish(
            static_cast<std::size_t>(config.workers.count), {0.0, 0});
        for (int w = 0; w < config.workers.count; ++w) worker_finish[static_cast<std::size_t>(w)] = {0.0, w};
        for (const auto& r : tlt.requests) {
            auto& slot = worker_finish[static_cast<std::size_t>(r.request_id % config.workers.count)];
            slot.first = std::max(slot.first, r.finish_time);
        }
        std::sort(worker_finish.begin(), worker_finish.end());
        double session_start = -1.0;
        for (const auto& [time, worker_id] : worker_finish) {
            auto actions = coordinator.transition(worker_id, WorkerState::Idle);
            for (const auto& a : actions) {
                if (a.type == CoordActionType::StartTraining && session_start < 0.0) {
                    session_start = time;
                }
                if (a.type == CoordActionType::StartTraining ||
                    a.type == CoordActionType::JoinTraining) {
                    coordinator.transition(a.worker_id, WorkerState::Training);
                }
            }
        }

        int iterations = 0;
        if (session_start >= 0.0) {
            iterations = static_cast<int>(
                std::floor((tlt.total_time - session_start) / config.workers.iteration_cost));
        }

        bool published_this_step = false;
        int iterations_run = 0;
        if (config.drafter.adaptive_training && iterations > 0) {
            DataBuffer view = buffer;
            std::vector<TokenSeq> partial;
            for (const auto& r : tlt.requests) {
                if (session_start >= 0.0 && r.finish_time <= session_start) {
                    partial.push_back(train_stream(r));
                }
            }
            view.insert(step, partial);

            AdaptiveDrafter fresh(config.vocab_size, config.drafter.order,
                                  config.drafter.smoothing_alpha);
            fresh.set_version(published.drafter.version());
            SpotTrainConfig train_cfg;
            train_cfg.current_step = step;
            train_cfg.token_budget = config.workers.token_budget;
            train_cfg.pack_capacity = config.workers.pack_capacity;
            SpotTrainResult trained =
                spot_train_loop(std::move(fresh), view, train_cfg, iterations, {});
            iterations_run = trained.log.iterations;
            published = DrafterSnapshot{restore_checkpoint(trained.final_checkpoint),
                                        model.step_id()};
            published_this_step = true;
        }
        coordinator.rollout_complete();

        std::vector<TokenSeq> full_streams;
        for (const auto& r : tlt.requests) full_streams.push_back(train_stream(r));
        buffer.insert(step, full_streams);

        StepReport sr;
        sr.step = step;
        sr.baseline_time = baseline.total_time;
        sr.tlt_time = tlt.total_time;
        sr.speedup = baseline.total_time / tlt.total_time;
        std::vector<int> lens;
        double len_sum = 0.0;
        for (const auto& r : baseline.requests) {
            lens.push_back(static_cast<int>(r.generated.size()));
            len_sum += static_cast<double>(r.generated.size());
        }
        sr.mean_len = len_sum / static_cast<double>(lens.size());
        sr.p50_len = detail::percentile(lens, 0.50);
        sr.p75_len = detail::percentile(lens, 0.75);
        sr.max_len = *std::max_element(lens.begin(), lens.end());
        sr.mean_accept = tlt.mean_accept_len();
        sr.sd_steps = tlt.sd_steps;
        sr.plain_steps = tlt.plain_steps;
        sr.verify_events = tlt.verify_events;
        sr.ngram_verify_events = tlt.ngram_verify_events;
        sr.drafter_version = published.drafter.version();
        sr.snapshot_published = published_this_step;
        sr.training_iterations = iterations_run;
        {
            RngStream probe_rng = root.fork(500 + static_cast<std::uint64_t>(step));
            MarkovTargetModel sampler = model.with_temperature(1.0);
            std::vector<TokenSeq> probes;
            for (int i = 0; i < 8; ++i) {
                TokenSeq probe_prompt = random_prompt(probe_rng);
                probes.push_back(
                    generate_autoregressive(sampler, probe_prompt, 128, probe_rng));
            }
            sr.match_rate = greedy_match_rate(published.drafter, model, probes);
        }
        for (std::size_t i = log_before; i < coordinator.event_log().size(); ++i) {
            sr.coord_events[coord_action_name(coordinator.event_log()[i].type)] += 1;
        }
        for (const auto& arm : mab.arms()) sr.mab_selections.push_back(arm.selections);

        if (accept_at_least.size() < tlt.accept_at_least.size()) {
            accept_at_least.resize(tlt.accept_at_least.size(), 0);
        }
        for (std::size_t i = 0; i < tlt.accept_at_least.size(); ++i) {
            accept_at_least[i] += tlt.accept_at_least[i];
        }
        total_verify_events += tlt.verify_events;

        total_baseline += baseline.total_time;
        total_tlt += tlt.total_time;
        report.steps.push_back(std::move(sr));

        model = apply_drift(model, config.drift_lambda, drift_rng);
    }

    report.aggregate_speedup = total_baseline / total_tlt;
    for (std::int64_t count : accept_at_least) {
        report.accept_rate_by_position.push_back(
            total_verify_events > 0
                ? static_cast<double>(count) / static_cast<double>(total_verify_events)
                : 0.0);
    }
    report.mab_state = beg_state_to_json(mab);

    BucketSpec bucket_spec{config.mab.thresholds,
                           std::max(config.mab.max_capture_batch, config.mab.thresholds.back())};
    // The capture comparison uses one representative strategy per
    // tokens_to_verify group (the memory question is about distinct graphs).
    std::map<int, SpecStrategy, std::greater<int>> rep;
    for (const auto& s : config.strategies) rep.emplace(s.tokens_to_verify, s);
    std::vector<SpecStrategy> rep_list;
    for (const auto& [verify, s] : rep) rep_list.push_back(s);
    CapturePlan bucketed = plan_captures(rep_list, bucket_spec);
    CapturePlan vanilla = plan_captures_vanilla(rep_list, bucket_spec);
    report.capture_comparison = {
        {"bucketed", capture_plan_to_json(bucketed)},
        {"vanilla", capture_plan_to_json(vanilla)},
        {"ratio", vanilla.total_memory_units / bucketed.total_memory_units}};

    CalibrationProfile profile;
    profile.cost = config.cost;
    profile.mean_emitted = config.calibration_emitted;
    std::map<int, bool> verify_seen;
    for (const auto& s : config.strategies) verify_seen[s.tokens_to_verify] = true;
    for (int batch : {1, 2, 4, 8, 16, 32}) {
        for (const auto& [verify, seen] : verify_seen) {
            SpecStrategy s = rep.at(verify);
            report.speedup_curve.push_back(
                RunReport::SpeedupPoint{batch, verify, sd_speedup(profile, batch, s)});
        }
    }
    return report;
}

// --- emission ---------------------------------------------------------

inline nlohmann::json report_to_json(const RunReport& report) {
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& s : report.steps) {
        steps.push_back({{"step", s.step},
                         {"baseline_time", s.baseline_time},
                         {"tlt_time", s.tlt_time},
                         {"speedup", s.speedup},
                         {"mean_len", s.mean_len},
                         {"p50_len", s.p50_len},
                         {"p75_len", s.p75_len},
                         {"max_len", s.max_len},
                         {"mean_accept", s.mean_accept},
                         {"sd_steps", s.sd_steps},
                         {"plain_steps", s.plain_steps},
                         {"verify_events", s.verify_events},
                         {"ngram_verify_events", s.ngram_verify_events},
                         {"drafter_version", s.drafter_version},
                         {"match_rate", s.match_rate},
                         {"snapshot_published", s.snapshot_published},
                         {"training_iterations", s.training_iterations},
                         {"coord_events", s.coord_events},
                         {"mab_selections", s.mab_selections}});
    }
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& p : report.speedup_curve) {
        curve.push_back({{"batch", p.batch},
                         {"tokens_to_verify", p.tokens_to_verify},
                         {"speedup", p.speedup}});
    }
    return {{"config", report.config_echo},
            {"steps", std::move(steps)},
            {"aggregate_speedup", report.aggregate_speedup},
            {"accept_rate_by_position", report.accept_rate_by_position},
            {"mab_state", report.mab_state},
            {"capture_comparison", report.capture_comparison},
            {"speedup_curve", std::move(curve)},
            {"model", report.model_doc}};
}

/// Writes the per-step table and the figure data series under `dir`.
/// csv emits flat tables; json emits the full report document. Output is
/// byte-stable for identical reports.
inline std::vector<std::string> emit_report(const RunReport& report, const std::string& format,
                                            const std::string& dir) {
    namespace fs = std::filesystem;
    if (format != "csv" && format != "json")
        throw ConfigError("format", "must be csv or json");
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw ConfigError("out", "cannot create output directory: " + dir);

    auto open = [&](const std::string& name) {
        std::ofstream out(dir + "/" + name, std::ios::binary | std::ios::trunc);
        if (!out) throw ConfigError("out", "cannot write file: " + dir + "/" + name);
        return out;
    };
    std::vector<std::string> written;
    using detail::fmt_double;

    if (format == "json") {
        auto out = open("report.json");
        out << report_to_json(report).dump(2) << "\n";
        written.push_back("report.json");
        return written;
    }

    {
        auto out = open("steps.csv");
        out << "step,baseline_time,tlt_time,speedup,mean_len,p50_len,p75_len,max_len,"
               "mean_accept,sd_steps,plain_steps,verify_events,ngram_verify_events,"
               "drafter_version,match_rate,training_iterations\n";
        for (const auto& s : report.steps) {
            out << s.step << ',' << fmt_double(s.baseline_time) << ',' << fmt_double(s.tlt_time)
                << ',' << fmt_double(s.speedup) << ',' << fmt_double(s.mean_len) << ','
                << s.p50_len << ',' << s.p75_len << ',' << s.max_len << ','
                << fmt_double(s.mean_accept) << ',' << s.sd_steps << ',' << s.plain_steps << ','
                << s.verify_events << ',' << s.ngram_verify_events << ',' << s.drafter_version
                << ',' << fmt_double(s.match_rate) << ',' << s.training_iterations << "\n";
        }
        written.push_back("steps.csv");
    }
    {
        auto out = open("accept_position.csv");
        out << "position,accept_rate\n";
        for (std::size_t i = 0; i < report.accept_rate_by_position.size(); ++i) {
            out << (i + 1) << ',' << fmt_double(report.accept_rate_by_position[i]) << "\n";
        }
        written.push_back("accept_position.csv");
    }
    {
        auto out = open("speedup_vs_batch.csv");
        out << "batch,tokens_to_verify,speedup\n";
        for (const auto& p : report.speedup_curve) {
            out << p.batch << ',' << p.tokens_to_verify << ',' << fmt_double(p.speedup) << "\n";
        }
        written.push_back("speedup_vs_batch.csv");
    }
    {
        auto out = open("capture_memory.csv");
        out << "plan,side,bucket_lo,bucket_hi,tokens_to_verify,top_k,draft_depth,memory_units\n";
        for (const char* plan : {"bucketed", "vanilla"}) {
            if (!report.capture_comparison.contains(plan)) continue;
            for (const auto& e : report.capture_comparison.at(plan).at("entries")) {
                out << plan << ',' << e.at("side").get<std::string>() << ','
                    << e.at("bucket_lo").get<int>() << ',' << e.at("bucket_hi").get<int>() << ','
                    << e.at("tokens_to_verify").get<int>() << ',' << e.at("top_k").get<int>()
                    << ',' << e.at("draft_depth").get<int>() << ','
                    << fmt_double(e.at("memory_units").get<double>()) << "\n";
            }
        }
        written.push_back("capture_memory.csv");
    }
    {
        auto out = open("reward_trace.csv");
        out << "arm,draft_depth,top_k,tokens_to_verify,sample,reward,mean_accept\n";
        if (report.mab_state.contains("arms")) {
            int arm_idx = 0;
            for (const auto& arm : report.mab_state.at("arms")) {
                const auto& rewards = arm.at("rewards");
                const auto& accepts = arm.at("accept_lens");
                for (std::size_t i = 0; i < rewards.size(); ++i) {
                    out << arm_idx << ',' << arm.at("strategy").at("draft_depth").get<int>() << ','
                        << arm.at("strategy").at("top_k").get<int>() << ','
                        << arm.at("strategy").at("tokens_to_verify").get<int>() << ',' << i << ','
                        << fmt_double(rewards[i].get<double>()) << ','
                        << fmt_double(accepts[i].get<double>()) << "\n";
                }
                ++arm_idx;
            }
        }
        written.push_back("reward_trace.csv");
    }
    return written;
}

} // namespace specsim
