#pragma once

// Amortized variational inference pretraining: minibatch Adam on the
// forward-KL objective  E[ |f_phi(x;y)|^2 / 2 - log|det grad_x f_phi| ]
// with geometric per-epoch stepsize decay, per-epoch validation on random
// subsets, and a binary checkpoint format.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowcal/adam.hpp"
#include "flowcal/autodiff.hpp"
#include "flowcal/flow.hpp"
#include "flowcal/io.hpp"
#include "flowcal/prior.hpp"
#include "flowcal/rng.hpp"

namespace flowcal {

struct TrainConfig {
    int64_t batch = 16;
    int64_t epochs = 200;
    double stepsize_initial = 1e-3;
    double stepsize_final = 1e-5;
    int64_t val_subset = 64; // pairs drawn per validation pass
    uint64_t seed = 1;

    void validate() const {
        if (batch < 1) throw ValidationError("train: batch must be >= 1");
        if (epochs < 0) throw ValidationError("train: epochs must be >= 0");
        if (!(stepsize_final > 0.0) || !(stepsize_initial >= stepsize_final))
            throw ValidationError("train: need 0 < final stepsize <= initial stepsize");
        if (val_subset < 1) throw ValidationError("train: val_subset must be >= 1");
    }

    double stepsize_at(int64_t epoch) const {
        if (epochs <= 1) return stepsize_initial;
        const double ratio = stepsize_final / stepsize_initial;
        return stepsize_initial *
               std::pow(ratio, static_cast<double>(epoch) / static_cast<double>(epochs - 1));
    }
};

struct TrainCurves {
    std::vector<double> train_loss; // one entry per epoch
    std::vector<double> val_loss;
};

struct TrainResult {
    TrainCurves curves;
    bool diverged = false;
};

// Mean over the batch of |f_phi(x;y)|^2 / 2 - logdet.
inline double amortized_loss(const ConditionalFlow& flow, const std::vector<TrainingPair>& batch) {
    if (batch.empty()) throw ValidationError("amortized_loss: empty batch");
    double total = 0.0;
    for (size_t i = 0; i < batch.size(); ++i) {
        const FlowForwardResult r = flow_forward(flow, batch[i].x, batch[i].y_cond);
        const double term = 0.5 * dot(r.z, r.z) - r.logdet;
        if (!std::isfinite(term))
            throw DivergenceError("amortized_loss: non-finite value at pair " + std::to_string(i));
        total += term;
    }
    return total / static_cast<double>(batch.size());
}

namespace detail {

struct TrainGraph {
    Graph g;
    FlowParamNodes params;
    NodeId x_in = -1, y_in = -1, loss = -1;
    int64_t batch = 0;
};

inline TrainGraph build_train_graph(const ConditionalFlow& flow, int64_t batch) {
    TrainGraph tg;
    tg.batch = batch;
    tg.x_in = tg.g.input("x", {batch, flow.arch.dim});
    tg.y_in = tg.g.input("y", {batch, flow.arch.cond_dim});
    tg.params = register_flow_params(tg.g, flow, /*trainable=*/true);
    const NodeId h = append_condition_encoder(tg.g, tg.params, tg.y_in);
    const FlowForwardNodes fwd = append_flow_forward(tg.g, flow.arch, tg.params, tg.x_in, h);
    const NodeId half_sq = tg.g.scale_shift(tg.g.sqnorm(fwd.z), 0.5, 0.0);
    tg.loss = tg.g.scale_shift(tg.g.sub(half_sq, fwd.logdet_sum), 1.0 / static_cast<double>(batch), 0.0);
    return tg;
}

inline void fill_batch(const std::vector<TrainingPair>& pairs, const std::vector<int64_t>& order,
                       int64_t start, int64_t batch, Tensor& xb, Tensor& yb) {
    const int64_t d = xb.dim(1);
    const int64_t c = yb.dim(1);
    for (int64_t b = 0; b < batch; ++b) {
        const TrainingPair& p = pairs[static_cast<size_t>(order[static_cast<size_t>(start + b)])];
        for (int64_t i = 0; i < d; ++i) xb[b * d + i] = p.x[i];
        for (int64_t i = 0; i < c; ++i) yb[b * c + i] = p.y_cond[i];
    }
}

} // namespace detail

// Minibatch Adam over phi. The dataset is `pairs` with the first n_train
// entries used for training and the remainder for validation. Deterministic
// under cfg.seed; on divergence the flow is rolled back to the last epoch
// that finished with finite losses.
inline TrainResult train_amortized(ConditionalFlow& flow, const std::vector<TrainingPair>& pairs,
                                   int64_t n_train, const TrainConfig& cfg) {
    cfg.validate();
    if (n_train < 1 || n_train > static_cast<int64_t>(pairs.size()))
        throw ValidationError("train_amortized: bad train/validation split");
    const int64_t n_val = static_cast<int64_t>(pairs.size()) - n_train;
    std::vector<TrainingPair> train_view(pairs.begin(), pairs.begin() + n_train);
    flow.cond_mean = mean_condition(train_view).reshaped(flow.cond_mean.shape());

    TrainResult res;
    if (cfg.epochs == 0) return res;
    if (cfg.batch > n_train)
        throw ValidationError("train_amortized: batch larger than the training split");

    detail::TrainGraph tg = detail::build_train_graph(flow, cfg.batch);
    const std::vector<NodeId> param_ids = tg.g.trainable_params();
    AdamState adam;
    for (NodeId id : param_ids) {
        adam.m.emplace_back(tg.g.at(id).shape);
        adam.v.emplace_back(tg.g.at(id).shape);
    }

    Rng shuffle_rng = Rng(cfg.seed).fork(1);
    Rng val_rng = Rng(cfg.seed).fork(2);
    Tensor xb({cfg.batch, flow.arch.dim});
    Tensor yb({cfg.batch, flow.arch.cond_dim});

    // Snapshot of the last epoch that completed with finite losses.
    ConditionalFlow last_good = flow;
    sync_params_from_graph(last_good, tg.g, tg.params);

    const int64_t steps = n_train / cfg.batch;
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.stepsize_at(epoch);
        const std::vector<int64_t> order = shuffle_rng.permutation(n_train);
        double epoch_loss = 0.0;
        bool finite = true;
        for (int64_t s = 0; s < steps; ++s) {
            detail::fill_batch(pairs, order, s * cfg.batch, cfg.batch, xb, yb);
            tg.g.bind("x", xb);
            tg.g.bind("y", yb);
            try {
                tg.g.forward();
                tg.g.backward(tg.loss);
                adam_step_graph(tg.g, param_ids, adam, lr);
            } catch (const DivergenceError&) {
                finite = false;
                break;
            }
            epoch_loss += tg.g.value(tg.loss)[0];
        }
        if (!finite || !std::isfinite(epoch_loss)) {
            res.diverged = true;
            break;
        }
        res.curves.train_loss.push_back(epoch_loss / static_cast<double>(steps));

        // Validation over a random subset, numeric path (no gradients).
        sync_params_from_graph(flow, tg.g, tg.params);
        double vloss = std::numeric_limits<double>::quiet_NaN();
        if (n_val > 0) {
            const int64_t take = std::min(cfg.val_subset, n_val);
            const std::vector<int64_t> vorder = val_rng.permutation(n_val);
            std::vector<TrainingPair> vbatch;
            vbatch.reserve(static_cast<size_t>(take));
            for (int64_t i = 0; i < take; ++i)
                vbatch.push_back(pairs[static_cast<size_t>(n_train + vorder[static_cast<size_t>(i)])]);
            vloss = amortized_loss(flow, vbatch);
        }
        res.curves.val_loss.push_back(vloss);
        last_good = flow;
    }
    flow = last_good;
    return res;
}

// ---- checkpoint format -----------------------------------------------------
//
// "AVIF", u32 version, u64 header length, JSON header (architecture,
// parameter manifest, training summary), then raw f64 parameter blocks in
// manifest order.

inline constexpr uint32_t kCheckpointVersion = 1;

inline std::vector<uint8_t> checkpoint_to_bytes(const ConditionalFlow& flow,
                                                const TrainCurves& curves = {}) {
    detail::require_little_endian();
    nlohmann::json header;
    header["arch"] = {{"dim", flow.arch.dim},       {"cond_dim", flow.arch.cond_dim},
                      {"layers", flow.arch.layers}, {"hidden", flow.arch.hidden},
                      {"feature", flow.arch.feature}, {"clamp", flow.arch.clamp}};
    nlohmann::json manifest = nlohmann::json::array();
    flow.for_each_param([&](const std::string& name, const Tensor& t) {
        manifest.push_back({{"name", name}, {"shape", t.shape()}});
    });
    header["params"] = manifest;
    header["train"] = {{"epochs", curves.train_loss.size()},
                       {"train_loss", curves.train_loss},
                       {"val_loss", curves.val_loss}};
    const std::string hs = header.dump();

    ByteWriter w;
    w.magic("AVIF");
    w.u32(kCheckpointVersion);
    w.str(hs);
    flow.for_each_param([&](const std::string&, const Tensor& t) { w.f64s(t); });
    return std::move(w.bytes);
}

inline void save_checkpoint(const ConditionalFlow& flow, const std::string& path,
                            const TrainCurves& curves = {}) {
    write_file(path, checkpoint_to_bytes(flow, curves));
}

struct LoadedCheckpoint {
    ConditionalFlow flow;
    TrainCurves curves;
};

inline LoadedCheckpoint checkpoint_from_bytes(const std::vector<uint8_t>& bytes) {
    detail::require_little_endian();
    ByteReader r(bytes);
    r.expect_magic("AVIF", "checkpoint");
    const uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw IoError("checkpoint: format version " + std::to_string(version) + " unsupported (want " +
                      std::to_string(kCheckpointVersion) + ")");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(r.str());
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("checkpoint: bad JSON header: ") + e.what());
    }
    LoadedCheckpoint out;
    try {
        const auto& a = header.at("arch");
        out.flow = build_flow(a.at("dim").get<int64_t>(), a.at("cond_dim").get<int64_t>(),
                              a.at("layers").get<int>(), a.at("hidden").get<int64_t>(),
                              a.at("feature").get<int64_t>(), a.at("clamp").get<double>(), /*seed=*/0);
        out.curves.train_loss = header.at("train").at("train_loss").get<std::vector<double>>();
        out.curves.val_loss = header.at("train").at("val_loss").get<std::vector<double>>();
        size_t i = 0;
        const auto& manifest = header.at("params");
        out.flow.for_each_param([&](const std::string& name, Tensor& t) {
            if (i >= manifest.size()) throw IoError("checkpoint: parameter manifest too short");
            const auto& entry = manifest.at(i++);
            if (entry.at("name").get<std::string>() != name ||
                entry.at("shape").get<Shape>() != t.shape())
                throw IoError("checkpoint: architecture mismatch at parameter '" + name + "'");
            r.raw(t.data(), static_cast<size_t>(t.numel()) * 8);
        });
        if (i != manifest.size()) throw IoError("checkpoint: parameter manifest too long");
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("checkpoint: malformed header: ") + e.what());
    }
    r.done("checkpoint");
    return out;
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    return checkpoint_from_bytes(read_file(path));
}

inline void curves_to_csv(const TrainCurves& curves, const std::string& path) {
    CsvWriter csv({"epoch", "train_loss", "val_loss"});
    for (size_t e = 0; e < curves.train_loss.size(); ++e)
        csv.row({std::to_string(e), CsvWriter::num(curves.train_loss[e]),
                 CsvWriter::num(curves.val_loss[e])});
    csv.save(path);
}

} // namespace flowcal
