#pragma once

// Experiment configuration: one sectioned JSON document drives every CLI
// command. The schema is strict: unknown keys are rejected so a typo cannot
// silently fall back to a default.

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

#include "flowcal/correction.hpp"
#include "flowcal/flow.hpp"
#include "flowcal/io.hpp"
#include "flowcal/physics.hpp"
#include "flowcal/prior.hpp"
#include "flowcal/stats.hpp"
#include "flowcal/train.hpp"

namespace flowcal {

using Json = nlohmann::json;

struct ScenarioConfig {
    int64_t sources = 4;         // shifted source count (base survey has more)
    double noise_multiplier = 2.5;
    uint64_t truth_seed = 1234;
    bool shifted_prior = false;  // draw the truth from the shifted prior
};

struct InferenceConfig {
    int64_t n_samples = 1000;
    std::vector<std::pair<int64_t, int64_t>> probes = {{4, 8}, {8, 16}, {12, 24}};
    int64_t bins = 50;
    double ci_level = 0.99;
    double norm_eps = 0.05;
};

struct SweepConfig {
    std::vector<int64_t> source_counts = {16, 8, 4};
    std::vector<double> multipliers = {1.5, 2.0, 2.5, 3.0};
    std::vector<uint64_t> seeds = {1, 2, 3};
    int64_t n_samples = 500;
    double min_pass_rate = 0.9;
};

struct FlowConfig {
    int layers = 8;
    int64_t hidden = 0;  // 0 derives the 4*D default
    int64_t feature = 0; // 0 derives the 2*D default
    double clamp = 2.0;
};

struct ExperimentConfig {
    GeoPriorConfig prior;
    GeoPriorConfig shifted_prior;
    bool has_shifted_prior = false;
    int64_t survey_sources = 16;
    double survey_taper_len = 4.0;
    double survey_f0 = 0.15;
    int64_t survey_half_width = 8;
    double sigma_base = 0.25;
    double noise_multiplier = 1.0;
    FlowConfig flow;
    TrainConfig train;
    int64_t n_train = 2000;
    int64_t n_val = 200;
    CorrectionConfig correction;
    ScenarioConfig scenario;
    InferenceConfig inference;
    SweepConfig sweep;
    uint64_t seed_dataset = 11;
    uint64_t seed_inference = 13;
    std::string out_dir = "out";

    BornLiteSurvey survey() const {
        return make_survey(prior.nz, prior.nx, survey_sources, survey_taper_len, survey_f0,
                           survey_half_width);
    }
    FlowArch flow_arch() const {
        const int64_t d = prior.nz * prior.nx;
        FlowArch a;
        a.dim = d;
        a.cond_dim = d;
        a.layers = flow.layers;
        a.hidden = flow.hidden > 0 ? flow.hidden : 4 * d;
        a.feature = flow.feature > 0 ? flow.feature : 2 * d;
        a.clamp = flow.clamp;
        return a;
    }
    GeoPriorConfig scenario_prior() const {
        return (scenario.shifted_prior && has_shifted_prior) ? shifted_prior : prior;
    }
};

namespace detail {

inline void require_keys(const Json& obj, const std::string& section,
                         const std::vector<std::string>& allowed) {
    if (!obj.is_object()) throw ValidationError("config: section '" + section + "' must be an object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const std::string& k : allowed)
            if (it.key() == k) ok = true;
        if (!ok)
            throw ValidationError("config: unknown key '" + it.key() + "' in section '" + section +
                                  "'");
    }
}

template <class T>
T get_or(const Json& obj, const std::string& key, T fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const Json::exception&) {
        throw ValidationError("config: key '" + key + "' has the wrong type");
    }
}

inline GeoPriorConfig parse_prior(const Json& j, const std::string& section, GeoPriorConfig base) {
    require_keys(j, section,
                 {"nz", "nx", "min_layers", "max_layers", "min_amp", "max_amp", "min_undulation",
                  "max_undulation", "min_wavelength", "max_wavelength", "max_dip", "water_rows"});
    base.nz = get_or<int64_t>(j, "nz", base.nz);
    base.nx = get_or<int64_t>(j, "nx", base.nx);
    base.min_layers = get_or<int64_t>(j, "min_layers", base.min_layers);
    base.max_layers = get_or<int64_t>(j, "max_layers", base.max_layers);
    base.min_amp = get_or<double>(j, "min_amp", base.min_amp);
    base.max_amp = get_or<double>(j, "max_amp", base.max_amp);
    base.min_undulation = get_or<double>(j, "min_undulation", base.min_undulation);
    base.max_undulation = get_or<double>(j, "max_undulation", base.max_undulation);
    base.min_wavelength = get_or<double>(j, "min_wavelength", base.min_wavelength);
    base.max_wavelength = get_or<double>(j, "max_wavelength", base.max_wavelength);
    base.max_dip = get_or<double>(j, "max_dip", base.max_dip);
    base.water_rows = get_or<int64_t>(j, "water_rows", base.water_rows);
    return base;
}

} // namespace detail

inline ExperimentConfig parse_config(const Json& root) {
    detail::require_keys(root, "(root)",
                         {"prior", "shifted_prior", "survey", "noise", "flow", "train", "correction",
                          "scenario", "inference", "sweep", "seeds", "output"});
    ExperimentConfig cfg;
    if (root.contains("prior")) cfg.prior = detail::parse_prior(root["prior"], "prior", cfg.prior);
    if (root.contains("shifted_prior")) {
        cfg.shifted_prior = detail::parse_prior(root["shifted_prior"], "shifted_prior", cfg.prior);
        cfg.has_shifted_prior = true;
    }
    if (root.contains("survey")) {
        const Json& j = root["survey"];
        detail::require_keys(j, "survey", {"n_sources", "taper_len", "f0", "half_width"});
        cfg.survey_sources = detail::get_or<int64_t>(j, "n_sources", cfg.survey_sources);
        cfg.survey_taper_len = detail::get_or<double>(j, "taper_len", cfg.survey_taper_len);
        cfg.survey_f0 = detail::get_or<double>(j, "f0", cfg.survey_f0);
        cfg.survey_half_width = detail::get_or<int64_t>(j, "half_width", cfg.survey_half_width);
    }
    if (root.contains("noise")) {
        const Json& j = root["noise"];
        detail::require_keys(j, "noise", {"sigma_base", "multiplier"});
        cfg.sigma_base = detail::get_or<double>(j, "sigma_base", cfg.sigma_base);
        cfg.noise_multiplier = detail::get_or<double>(j, "multiplier", cfg.noise_multiplier);
    }
    if (root.contains("flow")) {
        const Json& j = root["flow"];
        detail::require_keys(j, "flow", {"layers", "hidden", "feature", "clamp"});
        cfg.flow.layers = detail::get_or<int>(j, "layers", cfg.flow.layers);
        cfg.flow.hidden = detail::get_or<int64_t>(j, "hidden", cfg.flow.hidden);
        cfg.flow.feature = detail::get_or<int64_t>(j, "feature", cfg.flow.feature);
        cfg.flow.clamp = detail::get_or<double>(j, "clamp", cfg.flow.clamp);
    }
    if (root.contains("train")) {
        const Json& j = root["train"];
        detail::require_keys(j, "train",
                             {"batch", "epochs", "stepsize_initial", "stepsize_final", "val_subset",
                              "seed", "n_train", "n_val"});
        cfg.train.batch = detail::get_or<int64_t>(j, "batch", cfg.train.batch);
        cfg.train.epochs = detail::get_or<int64_t>(j, "epochs", cfg.train.epochs);
        cfg.train.stepsize_initial = detail::get_or<double>(j, "stepsize_initial", cfg.train.stepsize_initial);
        cfg.train.stepsize_final = detail::get_or<double>(j, "stepsize_final", cfg.train.stepsize_final);
        cfg.train.val_subset = detail::get_or<int64_t>(j, "val_subset", cfg.train.val_subset);
        cfg.train.seed = detail::get_or<uint64_t>(j, "seed", cfg.train.seed);
        cfg.n_train = detail::get_or<int64_t>(j, "n_train", cfg.n_train);
        cfg.n_val = detail::get_or<int64_t>(j, "n_val", cfg.n_val);
    }
    if (root.contains("correction")) {
        const Json& j = root["correction"];
        detail::require_keys(j, "correction",
                             {"epochs", "stepsize", "decay_factor", "decay_every", "z_batch",
                              "prior_std", "seed"});
        cfg.correction.epochs = detail::get_or<int64_t>(j, "epochs", cfg.correction.epochs);
        cfg.correction.stepsize = detail::get_or<double>(j, "stepsize", cfg.correction.stepsize);
        cfg.correction.decay_factor = detail::get_or<double>(j, "decay_factor", cfg.correction.decay_factor);
        cfg.correction.decay_every = detail::get_or<int64_t>(j, "decay_every", cfg.correction.decay_every);
        cfg.correction.z_batch = detail::get_or<int64_t>(j, "z_batch", cfg.correction.z_batch);
        cfg.correction.prior_std = detail::get_or<double>(j, "prior_std", cfg.correction.prior_std);
        cfg.correction.seed = detail::get_or<uint64_t>(j, "seed", cfg.correction.seed);
    }
    if (root.contains("scenario")) {
        const Json& j = root["scenario"];
        detail::require_keys(j, "scenario",
                             {"sources", "noise_multiplier", "truth_seed", "shifted_prior"});
        cfg.scenario.sources = detail::get_or<int64_t>(j, "sources", cfg.scenario.sources);
        cfg.scenario.noise_multiplier =
            detail::get_or<double>(j, "noise_multiplier", cfg.scenario.noise_multiplier);
        cfg.scenario.truth_seed = detail::get_or<uint64_t>(j, "truth_seed", cfg.scenario.truth_seed);
        cfg.scenario.shifted_prior = detail::get_or<bool>(j, "shifted_prior", cfg.scenario.shifted_prior);
        if (cfg.scenario.shifted_prior && !cfg.has_shifted_prior)
            throw ValidationError("config: scenario.shifted_prior needs a shifted_prior section");
    }
    if (root.contains("inference")) {
        const Json& j = root["inference"];
        detail::require_keys(j, "inference", {"n_samples", "probes", "bins", "ci_level", "norm_eps"});
        cfg.inference.n_samples = detail::get_or<int64_t>(j, "n_samples", cfg.inference.n_samples);
        cfg.inference.bins = detail::get_or<int64_t>(j, "bins", cfg.inference.bins);
        cfg.inference.ci_level = detail::get_or<double>(j, "ci_level", cfg.inference.ci_level);
        cfg.inference.norm_eps = detail::get_or<double>(j, "norm_eps", cfg.inference.norm_eps);
        if (j.contains("probes")) {
            cfg.inference.probes.clear();
            for (const Json& p : j.at("probes")) {
                if (!p.is_array() || p.size() != 2)
                    throw ValidationError("config: inference.probes entries must be [row, col]");
                cfg.inference.probes.emplace_back(p[0].get<int64_t>(), p[1].get<int64_t>());
            }
        }
    }
    if (root.contains("sweep")) {
        const Json& j = root["sweep"];
        detail::require_keys(j, "sweep",
                             {"source_counts", "multipliers", "seeds", "n_samples", "min_pass_rate"});
        cfg.sweep.source_counts =
            detail::get_or<std::vector<int64_t>>(j, "source_counts", cfg.sweep.source_counts);
        cfg.sweep.multipliers =
            detail::get_or<std::vector<double>>(j, "multipliers", cfg.sweep.multipliers);
        cfg.sweep.seeds = detail::get_or<std::vector<uint64_t>>(j, "seeds", cfg.sweep.seeds);
        cfg.sweep.n_samples = detail::get_or<int64_t>(j, "n_samples", cfg.sweep.n_samples);
        cfg.sweep.min_pass_rate = detail::get_or<double>(j, "min_pass_rate", cfg.sweep.min_pass_rate);
    }
    if (root.contains("seeds")) {
        const Json& j = root["seeds"];
        detail::require_keys(j, "seeds", {"dataset", "inference"});
        cfg.seed_dataset = detail::get_or<uint64_t>(j, "dataset", cfg.seed_dataset);
        cfg.seed_inference = detail::get_or<uint64_t>(j, "inference", cfg.seed_inference);
    }
    if (root.contains("output")) {
        if (!root["output"].is_string()) throw ValidationError("config: output must be a string path");
        cfg.out_dir = root["output"].get<std::string>();
    }

    // cross-section sanity
    cfg.prior.validate();
    if (cfg.has_shifted_prior) cfg.shifted_prior.validate();
    cfg.train.validate();
    if (cfg.correction.epochs < 1)
        throw ValidationError("config: correction.epochs must be >= 1");
    cfg.correction.validate();
    if (!(cfg.sigma_base > 0.0)) throw ValidationError("config: noise.sigma_base must be > 0");
    if (cfg.n_train < 1 || cfg.n_val < 0) throw ValidationError("config: bad dataset split");
    if (cfg.scenario.sources < 1 || cfg.scenario.sources > cfg.survey_sources)
        throw ValidationError("config: scenario.sources must be in [1, survey.n_sources]");
    for (const auto& [r, c] : cfg.inference.probes)
        if (r < 0 || r >= cfg.prior.nz || c < 0 || c >= cfg.prior.nx)
            throw ValidationError("config: probe outside the grid");
    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    Json root;
    try {
        const std::vector<uint8_t> bytes = read_file(path);
        root = Json::parse(bytes.begin(), bytes.end());
    } catch (const Json::exception& e) {
        throw ValidationError(std::string("config: JSON parse error: ") + e.what());
    }
    return parse_config(root);
}

// Canonical serialization used for config hashing (nlohmann objects iterate
// in sorted key order, so the dump is deterministic).
inline Json config_to_json(const ExperimentConfig& c) {
    Json j;
    auto prior_json = [](const GeoPriorConfig& p) {
        return Json{{"nz", p.nz},
                    {"nx", p.nx},
                    {"min_layers", p.min_layers},
                    {"max_layers", p.max_layers},
                    {"min_amp", p.min_amp},
                    {"max_amp", p.max_amp},
                    {"min_undulation", p.min_undulation},
                    {"max_undulation", p.max_undulation},
                    {"min_wavelength", p.min_wavelength},
                    {"max_wavelength", p.max_wavelength},
                    {"max_dip", p.max_dip},
                    {"water_rows", p.water_rows}};
    };
    j["prior"] = prior_json(c.prior);
    if (c.has_shifted_prior) j["shifted_prior"] = prior_json(c.shifted_prior);
    j["survey"] = {{"n_sources", c.survey_sources},
                   {"taper_len", c.survey_taper_len},
                   {"f0", c.survey_f0},
                   {"half_width", c.survey_half_width}};
    j["noise"] = {{"sigma_base", c.sigma_base}, {"multiplier", c.noise_multiplier}};
    j["flow"] = {{"layers", c.flow.layers},
                 {"hidden", c.flow.hidden},
                 {"feature", c.flow.feature},
                 {"clamp", c.flow.clamp}};
    j["train"] = {{"batch", c.train.batch},
                  {"epochs", c.train.epochs},
                  {"stepsize_initial", c.train.stepsize_initial},
                  {"stepsize_final", c.train.stepsize_final},
                  {"val_subset", c.train.val_subset},
                  {"seed", c.train.seed},
                  {"n_train", c.n_train},
                  {"n_val", c.n_val}};
    j["correction"] = {{"epochs", c.correction.epochs},
                       {"stepsize", c.correction.stepsize},
                       {"decay_factor", c.correction.decay_factor},
                       {"decay_every", c.correction.decay_every},
                       {"z_batch", c.correction.z_batch},
                       {"prior_std", c.correction.prior_std},
                       {"seed", c.correction.seed}};
    j["scenario"] = {{"sources", c.scenario.sources},
                     {"noise_multiplier", c.scenario.noise_multiplier},
                     {"truth_seed", c.scenario.truth_seed},
                     {"shifted_prior", c.scenario.shifted_prior}};
    Json probes = Json::array();
    for (const auto& [r, col] : c.inference.probes) probes.push_back({r, col});
    j["inference"] = {{"n_samples", c.inference.n_samples},
                      {"probes", probes},
                      {"bins", c.inference.bins},
                      {"ci_level", c.inference.ci_level},
                      {"norm_eps", c.inference.norm_eps}};
    j["sweep"] = {{"source_counts", c.sweep.source_counts},
                  {"multipliers", c.sweep.multipliers},
                  {"seeds", c.sweep.seeds},
                  {"n_samples", c.sweep.n_samples},
                  {"min_pass_rate", c.sweep.min_pass_rate}};
    j["seeds"] = {{"dataset", c.seed_dataset}, {"inference", c.seed_inference}};
    j["output"] = c.out_dir;
    return j;
}

inline std::string config_hash(const ExperimentConfig& c) {
    return hash_string_hex(config_to_json(c).dump());
}

} // namespace flowcal
