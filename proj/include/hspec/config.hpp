#pragma once

#include <cmath>
#include <string>

#include <nlohmann/json.hpp>

#include "hspec/common.hpp"

namespace hspec {

using json = nlohmann::json;

struct ModelConfig {
    int vocab_size = 256;  // byte-level
    int d_model = 128;
    int n_layers = 4;
    int n_heads = 4;
    int d_ff = 512;
    int max_seq_len = 512;
    uint64_t rng_seed = 1;

    void validate() const {
        if (vocab_size <= 0 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 ||
            max_seq_len <= 0)
            throw ConfigError("model config: all dims must be positive");
        if (d_model % n_heads != 0) throw ConfigError("model config: d_model % n_heads != 0");
    }
};

inline void to_json(json& j, const ModelConfig& c) {
    j = json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},   {"n_layers", c.n_layers},
             {"n_heads", c.n_heads},       {"d_ff", c.d_ff},         {"max_seq_len", c.max_seq_len},
             {"rng_seed", c.rng_seed}};
}
inline void from_json(const json& j, ModelConfig& c) {
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
}

enum class HeadMode { medusa, hydra, hydra_pp };

inline std::string to_string(HeadMode m) {
    switch (m) {
        case HeadMode::medusa: return "medusa";
        case HeadMode::hydra: return "hydra";
        case HeadMode::hydra_pp: return "hydra_pp";
    }
    return "?";
}
inline HeadMode head_mode_from_string(const std::string& s) {
    if (s == "medusa") return HeadMode::medusa;
    if (s == "hydra") return HeadMode::hydra;
    if (s == "hydra_pp") return HeadMode::hydra_pp;
    throw ConfigError("unknown head mode: " + s);
}

struct HeadsConfig {
    HeadMode mode = HeadMode::hydra;
    int k = 4;           // speculation depth == number of heads
    int mlp_layers = 1;  // 4 for hydra_pp
    int hidden_width = 128;
    int top_m = 10;

    // Input width of head i (1-based): medusa heads see only h.
    int head_input_width(int i, int d_model) const {
        return mode == HeadMode::medusa ? d_model : (i + 1) * d_model;
    }
    void validate() const {
        if (k < 1) throw ConfigError("heads config: K must be >= 1");
        if (mlp_layers < 1 || hidden_width < 1 || top_m < 1)
            throw ConfigError("heads config: mlp_layers/hidden_width/top_m must be positive");
    }
    static HeadsConfig defaults_for(HeadMode m, int d_model) {
        HeadsConfig c;
        c.mode = m;
        c.mlp_layers = (m == HeadMode::hydra_pp) ? 4 : 1;
        c.hidden_width = d_model;
        return c;
    }
};

inline void to_json(json& j, const HeadsConfig& c) {
    j = json{{"mode", to_string(c.mode)},
             {"k", c.k},
             {"mlp_layers", c.mlp_layers},
             {"hidden_width", c.hidden_width},
             {"top_m", c.top_m}};
}
inline void from_json(const json& j, HeadsConfig& c) {
    if (j.contains("mode")) c.mode = head_mode_from_string(j.at("mode").get<std::string>());
    c.k = j.value("k", c.k);
    c.mlp_layers = j.value("mlp_layers", c.mlp_layers);
    c.hidden_width = j.value("hidden_width", c.hidden_width);
    c.top_m = j.value("top_m", c.top_m);
}

enum class TrainObjective { next_token, teacher };

inline std::string to_string(TrainObjective o) {
    return o == TrainObjective::next_token ? "next_token" : "teacher";
}
inline TrainObjective objective_from_string(const std::string& s) {
    if (s == "next_token") return TrainObjective::next_token;
    if (s == "teacher") return TrainObjective::teacher;
    throw ConfigError("unknown objective: " + s);
}

struct TrainConfig {
    std::string corpus_path;
    int batch_size = 16;
    int seq_len = 256;
    int epochs = 1;
    double peak_lr = 1e-3;
    int warmup_steps = 100;
    TrainObjective objective = TrainObjective::teacher;
    double noise_alpha = 0.0;
    uint64_t rng_seed = 1;

    void validate() const {
        if (corpus_path.empty()) throw ConfigError("train config: corpus path required");
        if (batch_size < 1 || seq_len < 2 || epochs < 1)
            throw ConfigError("train config: batch_size/seq_len/epochs out of range");
        if (peak_lr <= 0) throw ConfigError("train config: peak_lr must be positive");
        if (warmup_steps < 0) throw ConfigError("train config: warmup_steps must be nonnegative");
        if (noise_alpha < 0) throw ConfigError("train config: noise_alpha must be nonnegative");
    }
};

inline void to_json(json& j, const TrainConfig& c) {
    j = json{{"corpus", c.corpus_path},
             {"batch_size", c.batch_size},
             {"seq_len", c.seq_len},
             {"epochs", c.epochs},
             {"peak_lr", c.peak_lr},
             {"warmup_steps", c.warmup_steps},
             {"objective", to_string(c.objective)},
             {"noise_alpha", c.noise_alpha},
             {"rng_seed", c.rng_seed}};
}
inline void from_json(const json& j, TrainConfig& c) {
    c.corpus_path = j.value("corpus", c.corpus_path);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seq_len = j.value("seq_len", c.seq_len);
    c.epochs = j.value("epochs", c.epochs);
    c.peak_lr = j.value("peak_lr", c.peak_lr);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    if (j.contains("objective"))
        c.objective = objective_from_string(j.at("objective").get<std::string>());
    c.noise_alpha = j.value("noise_alpha", c.noise_alpha);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
}

enum class AcceptCriterion { greedy, typical };

inline std::string to_string(AcceptCriterion c) {
    return c == AcceptCriterion::greedy ? "greedy" : "typical";
}
inline AcceptCriterion criterion_from_string(const std::string& s) {
    if (s == "greedy") return AcceptCriterion::greedy;
    if (s == "typical") return AcceptCriterion::typical;
    throw ConfigError("unknown acceptance criterion: " + s);
}

struct DecodeParams {
    AcceptCriterion criterion = AcceptCriterion::greedy;
    double tau = 0.7;      // typical only
    double epsilon = 0.25; // typical only
    double alpha = -1.0;   // typical only; < 0 means "default to sqrt(epsilon)"
    int max_new_tokens = 128;
    std::string stop;  // optional stop byte sequence; empty = none
    int batch = 1;
    uint64_t rng_seed = 1;

    double effective_alpha() const { return alpha < 0 ? std::sqrt(epsilon) : alpha; }
    void validate() const {
        if (max_new_tokens < 1) throw ConfigError("decode params: max_new_tokens must be >= 1");
        if (batch < 1) throw ConfigError("decode params: batch must be >= 1");
        if (criterion == AcceptCriterion::typical) {
            if (!(tau > 0)) throw ConfigError("decode params: tau must be positive");
            if (!(epsilon > 0 && epsilon < 1))
                throw ConfigError("decode params: epsilon must be in (0,1)");
            if (!(effective_alpha() > 0)) throw ConfigError("decode params: alpha must be positive");
        }
    }
};

inline void to_json(json& j, const DecodeParams& p) {
    j = json{{"criterion", to_string(p.criterion)},
             {"tau", p.tau},
             {"epsilon", p.epsilon},
             {"alpha", p.effective_alpha()},
             {"max_new_tokens", p.max_new_tokens},
             {"stop", p.stop},
             {"batch", p.batch},
             {"rng_seed", p.rng_seed}};
}
inline void from_json(const json& j, DecodeParams& p) {
    if (j.contains("criterion"))
        p.criterion = criterion_from_string(j.at("criterion").get<std::string>());
    p.tau = j.value("tau", p.tau);
    p.epsilon = j.value("epsilon", p.epsilon);
    p.alpha = j.value("alpha", p.alpha);
    p.max_new_tokens = j.value("max_new_tokens", p.max_new_tokens);
    p.stop = j.value("stop", p.stop);
    p.batch = j.value("batch", p.batch);
    p.rng_seed = j.value("rng_seed", p.rng_seed);
}

}  // namespace hspec
