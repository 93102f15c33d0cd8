#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "milbench/data.hpp"
#include "milbench/metrics.hpp"
#include "milbench/models.hpp"
#include "milbench/tensor.hpp"

namespace milbench {

/// Raised when a run hits a non-finite loss or gradient; the sweep records
/// the failure and moves on.
class TrainAbort : public std::runtime_error {
public:
    explicit TrainAbort(const std::string& what) : std::runtime_error(what) {}
};

/// Fixed training protocol. Everything except the learning rate and seed is
/// a protocol constant; overrides exist for tests only.
struct TrainConfig {
    std::size_t epochs = 50;
    double weight_decay = 1e-5;
    std::size_t bags_per_batch = 4;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Loss and schedule
// ---------------------------------------------------------------------------

/// Inverse-frequency class weights, w_c = N / (2 N_c).
inline std::array<double, 2> compute_class_weights(const std::vector<int>& train_labels) {
    double n0 = 0.0, n1 = 0.0;
    for (int l : train_labels) (l == 1 ? n1 : n0) += 1.0;
    if (n0 == 0.0 || n1 == 0.0)
        throw SpecError("class weights: training split contains a single class");
    double total = n0 + n1;
    return {total / (2.0 * n0), total / (2.0 * n1)};
}

/// -w_label * log softmax(logits)[label], stabilized via log-sum-exp.
/// Gradient wrt logits is w_label * (softmax - onehot).
inline Var weighted_cross_entropy(Var logits, int label,
                                  const std::array<double, 2>& weights) {
    Tape& t = *logits.tape;
    const Tensor& lv = logits.value();
    if (lv.size() != 2)
        throw DimensionError("weighted_cross_entropy: expected 2 logits, got " +
                             lv.shape_str());
    if (label != 0 && label != 1)
        throw SpecError("weighted_cross_entropy: label must be 0/1");
    double w = weights[static_cast<std::size_t>(label)];
    double mx = std::max(lv[0], lv[1]);
    double lse = mx + std::log(std::exp(lv[0] - mx) + std::exp(lv[1] - mx));
    Tensor out({1, 1});
    out[0] = w * (lse - lv[static_cast<std::size_t>(label)]);
    return t.op(std::move(out), {logits.id},
                [label, w, lse](Tape& tp, std::int32_t self) {
        const auto& ps = tp.parents_of(self);
        if (!tp.needs_grad(ps[0])) return;
        double g = tp.grad_of_const(self)[0];
        const Tensor& lv = tp.value_of(ps[0]);
        Tensor& gl = tp.grad_of(ps[0]);
        for (int c = 0; c < 2; ++c) {
            double p = std::exp(lv[static_cast<std::size_t>(c)] - lse);
            gl[static_cast<std::size_t>(c)] += g * w * (p - (c == label ? 1.0 : 0.0));
        }
    });
}

/// Cosine annealing to zero: lr(e) = base/2 * (1 + cos(pi*e/total)).
inline double cosine_lr(std::size_t epoch, double base_lr, std::size_t total_epochs = 50) {
    if (epoch > total_epochs)
        throw SpecError("cosine_lr: epoch beyond schedule length");
    double frac = static_cast<double>(epoch) / static_cast<double>(total_epochs);
    return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * frac));
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

struct AdamWState {
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;

    Tensor m, v;
    std::int64_t step = 0;

    explicit AdamWState(const std::vector<std::size_t>& shape) : m(shape), v(shape) {}
};

/// Bias-corrected Adam step with decoupled weight decay: the decay
/// p <- p - lr*wd*p is applied before (and independently of) the adaptive
/// update.
inline void adamw_step(Tensor& param, const Tensor& grad, AdamWState& st, double lr,
                       double weight_decay) {
    if (!param.same_shape(grad) || !param.same_shape(st.m))
        throw DimensionError("adamw: parameter/gradient shape mismatch");
    for (std::size_t i = 0; i < grad.size(); ++i)
        if (!std::isfinite(grad[i]))
            throw TrainAbort("adamw: non-finite gradient encountered");
    ++st.step;
    double bc1 = 1.0 - std::pow(AdamWState::kBeta1, static_cast<double>(st.step));
    double bc2 = 1.0 - std::pow(AdamWState::kBeta2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < param.size(); ++i) {
        param[i] -= lr * weight_decay * param[i];
        st.m[i] = AdamWState::kBeta1 * st.m[i] + (1.0 - AdamWState::kBeta1) * grad[i];
        st.v[i] = AdamWState::kBeta2 * st.v[i] +
                  (1.0 - AdamWState::kBeta2) * grad[i] * grad[i];
        double mhat = st.m[i] / bc1;
        double vhat = st.v[i] / bc2;
        param[i] -= lr * mhat / (std::sqrt(vhat) + AdamWState::kEps);
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "MILC", u32 version=1, u32 count, then per tensor
// u32 name_len, name bytes, u32 rank, u32 dims[rank], f64 payload.
// Little-endian throughout, like the embedding files.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::vector<NamedParam>& params,
                            const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for write: " + path.string());
    os.write("MILC", 4);
    detail::write_u32(os, 1);
    detail::write_u32(os, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        detail::write_u32(os, static_cast<std::uint32_t>(p.name.size()));
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        detail::write_u32(os, static_cast<std::uint32_t>(p.tensor->rank()));
        for (std::size_t e : p.tensor->shape())
            detail::write_u32(os, static_cast<std::uint32_t>(e));
        os.write(reinterpret_cast<const char*>(p.tensor->data()),
                 static_cast<std::streamsize>(p.tensor->size() * sizeof(double)));
    }
    if (!os) throw IoError("write failed: " + path.string());
}

/// Loads a checkpoint into existing parameters; names and shapes must match.
inline void load_checkpoint(std::vector<NamedParam> params,
                            const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "MILC", 4) != 0)
        throw IoError("checkpoint: bad magic in " + path.string());
    if (detail::read_u32(is, "version") != 1)
        throw IoError("checkpoint: unsupported version in " + path.string());
    std::uint32_t count = detail::read_u32(is, "count");
    if (count != params.size())
        throw IoError("checkpoint: tensor count mismatch in " + path.string());
    for (auto& p : params) {
        std::uint32_t name_len = detail::read_u32(is, "name length");
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len))
            throw IoError("checkpoint: truncated name in " + path.string());
        if (name != p.name)
            throw IoError("checkpoint: expected tensor '" + p.name + "', found '" +
                          name + "'");
        std::uint32_t rank = detail::read_u32(is, "rank");
        std::vector<std::size_t> shape(rank);
        for (auto& e : shape) e = detail::read_u32(is, "extent");
        if (shape != p.tensor->shape())
            throw IoError("checkpoint: shape mismatch for '" + name + "'");
        if (!is.read(reinterpret_cast<char*>(p.tensor->data()),
                     static_cast<std::streamsize>(p.tensor->size() * sizeof(double))))
            throw IoError("checkpoint: truncated payload in " + path.string());
    }
}

// ---------------------------------------------------------------------------
// Run results
// ---------------------------------------------------------------------------

struct RunKey {
    std::string extractor_id;
    std::string dataset_id;
    Architecture architecture = Architecture::AttentionMil;
    std::size_t config_index = 0;

    std::string canonical() const {
        return extractor_id + "|" + dataset_id + "|" + to_string(architecture) + "|" +
               std::to_string(config_index);
    }

    bool operator<(const RunKey& o) const { return canonical() < o.canonical(); }
    bool operator==(const RunKey& o) const { return canonical() == o.canonical(); }
};

struct EpochStats {
    double train_loss = 0.0;
    double val_auroc = 0.0;
    double val_ap = 0.0;
    double lr = 0.0;
};

struct RunResult {
    RunKey key;
    AggregatorConfig config;
    std::uint64_t seed = 0;
    std::string status = "ok";  // "ok" | "failed"
    std::string error;
    std::vector<EpochStats> epochs;
    std::size_t best_epoch = 0;
    double test_auroc = 0.0;
    double test_ap = 0.0;
    double wall_time_s = 0.0;
    std::string checkpoint_path;

    bool ok() const { return status == "ok"; }
};

inline nlohmann::json run_result_to_json(const RunResult& r) {
    nlohmann::json jc;
    jc["learning_rate"] = r.config.learning_rate;
    jc["bag_size"] = r.config.bag_size;
    jc["dropout"] = r.config.dropout;
    if (r.config.architecture == Architecture::AttentionMil)
        jc["layers"] = r.config.fc_widths;
    else
        jc["blocks"] = r.config.blocks;
    nlohmann::json j;
    j["type"] = "run";
    j["schema_version"] = 1;
    j["extractor"] = r.key.extractor_id;
    j["dataset"] = r.key.dataset_id;
    j["architecture"] = to_string(r.key.architecture);
    j["config_index"] = r.key.config_index;
    j["config"] = jc;
    j["seed"] = r.seed;
    j["status"] = r.status;
    if (!r.error.empty()) j["error"] = r.error;
    nlohmann::json je = nlohmann::json::array();
    for (const auto& e : r.epochs)
        je.push_back({{"train_loss", e.train_loss},
                      {"val_auroc", e.val_auroc},
                      {"val_ap", e.val_ap},
                      {"lr", e.lr}});
    j["epochs"] = je;
    j["best_epoch"] = r.best_epoch;
    j["test_auroc"] = r.test_auroc;
    j["test_ap"] = r.test_ap;
    j["wall_time_s"] = r.wall_time_s;
    if (!r.checkpoint_path.empty()) j["checkpoint"] = r.checkpoint_path;
    return j;
}

inline RunResult run_result_from_json(const nlohmann::json& j) {
    RunResult r;
    r.key.extractor_id = j.at("extractor").get<std::string>();
    r.key.dataset_id = j.at("dataset").get<std::string>();
    r.key.architecture = architecture_from_string(j.at("architecture").get<std::string>());
    r.key.config_index = j.at("config_index").get<std::size_t>();
    const auto& jc = j.at("config");
    r.config.architecture = r.key.architecture;
    r.config.learning_rate = jc.at("learning_rate").get<double>();
    r.config.bag_size = jc.at("bag_size").get<std::size_t>();
    r.config.dropout = jc.at("dropout").get<double>();
    if (r.key.architecture == Architecture::AttentionMil)
        r.config.fc_widths = jc.at("layers").get<std::vector<std::size_t>>();
    else
        r.config.blocks = jc.at("blocks").get<std::size_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.status = j.at("status").get<std::string>();
    r.error = j.value("error", "");
    for (const auto& je : j.at("epochs")) {
        EpochStats e;
        e.train_loss = je.at("train_loss").get<double>();
        e.val_auroc = je.at("val_auroc").get<double>();
        e.val_ap = je.at("val_ap").get<double>();
        e.lr = je.at("lr").get<double>();
        r.epochs.push_back(e);
    }
    r.best_epoch = j.at("best_epoch").get<std::size_t>();
    r.test_auroc = j.at("test_auroc").get<double>();
    r.test_ap = j.at("test_ap").get<double>();
    r.wall_time_s = j.at("wall_time_s").get<double>();
    r.checkpoint_path = j.value("checkpoint", "");
    return r;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace detail {

using AnyModel = std::variant<AttentionMilModel, TransMilModel>;

inline AnyModel build_model(const AggregatorConfig& cfg, std::size_t dim, SeededRng& rng,
                            const TransMilInternals& internals) {
    if (cfg.architecture == Architecture::AttentionMil)
        return AnyModel{std::in_place_type<AttentionMilModel>, dim, cfg, rng};
    return AnyModel{std::in_place_type<TransMilModel>, dim, cfg, rng, internals};
}

/// Evaluation over full (unsampled) bags in eval mode; deterministic given
/// the parameters.
inline ScoreSet evaluate(AnyModel& model, BagSource& bags,
                         const std::vector<const SlideRecord*>& records) {
    SeededRng eval_rng(0);  // dropout is inactive in eval mode; never drawn from
    ScoreSet out;
    for (const auto* r : records) {
        const Tensor& emb = bags.full(*r);
        Tape tape;
        Var bag = tape.leaf(emb, false);
        Tensor logits = std::visit(
            [&](auto& m) {
                auto bound = m.bind(tape);
                return m.forward(tape, bound, bag, false, eval_rng).logits.value();
            },
            model);
        out.scores.push_back(positive_probability(logits));
        out.labels.push_back(r->label);
    }
    return out;
}

}  // namespace detail

struct TrainRunOptions {
    /// When set, the best-validation checkpoint is written here.
    std::optional<std::filesystem::path> checkpoint_path;
    /// TransMIL constants; reduced in tests only.
    TransMilInternals transmil_internals{};
};

/// Executes the full protocol: `epochs` passes over the training split in
/// batches of `bags_per_batch` freshly sampled bags (losses averaged before a
/// single optimizer step), per-epoch validation on full bags, best checkpoint
/// by validation AUROC (earliest on ties), and a single test evaluation at
/// that checkpoint. Deterministic given the seed.
///
/// Throws TrainAbort on non-finite loss/gradient; callers that run sweeps
/// catch it and record a failed result.
inline RunResult train_run(const RunKey& key, const AggregatorConfig& cfg,
                           const DatasetManifest& manifest, const TrainConfig& tc,
                           const TrainRunOptions& opts = {}) {
    auto t0 = std::chrono::steady_clock::now();
    cfg.validate();

    RunResult result;
    result.key = key;
    result.config = cfg;
    result.seed = tc.seed;

    SeededRng rng(tc.seed);
    detail::AnyModel model = detail::build_model(cfg, manifest.dim, rng,
                                                 opts.transmil_internals);
    auto params = std::visit([](auto& m) { return m.parameters(); }, model);

    auto train_records = manifest.split(Split::Train);
    auto val_records = manifest.split(Split::Val);
    auto test_records = manifest.split(Split::Test);
    std::vector<int> train_labels;
    for (const auto* r : train_records) train_labels.push_back(r->label);
    std::array<double, 2> class_weights = compute_class_weights(train_labels);

    BagSource bags(manifest);
    std::vector<AdamWState> opt_states;
    for (const auto& p : params) opt_states.emplace_back(p.tensor->shape());

    std::vector<Tensor> best_params;
    double best_val_auroc = -1.0;
    std::size_t best_epoch = 0;

    std::vector<std::size_t> order(train_records.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
        double lr = cosine_lr(epoch, tc.learning_rate, tc.epochs);
        rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t batch_count = 0;

        for (std::size_t start = 0; start < order.size(); start += tc.bags_per_batch) {
            std::size_t stop = std::min(start + tc.bags_per_batch, order.size());
            Tape tape;
            Var total{};
            bool first = true;
            std::visit(
                [&](auto& m) {
                    auto bound = m.bind(tape);
                    for (std::size_t bi = start; bi < stop; ++bi) {
                        const SlideRecord* rec = train_records[order[bi]];
                        EmbeddingBag bag = bags.sample(*rec, cfg.bag_size, rng);
                        Var bag_var = tape.leaf(std::move(bag.embeddings), false);
                        ModelOutput out = m.forward(tape, bound, bag_var, true, rng);
                        Var loss = weighted_cross_entropy(out.logits, rec->label,
                                                          class_weights);
                        total = first ? loss : add(total, loss);
                        first = false;
                    }
                    Var mean_loss = scale(total, 1.0 / static_cast<double>(stop - start));
                    double lv = mean_loss.value()[0];
                    if (!std::isfinite(lv))
                        throw TrainAbort("non-finite training loss at epoch " +
                                         std::to_string(epoch));
                    tape.backward(mean_loss);
                    auto ps = m.parameters();
                    for (std::size_t pi = 0; pi < ps.size(); ++pi)
                        adamw_step(*ps[pi].tensor, bound.ordered[pi].grad(),
                                   opt_states[pi], lr, tc.weight_decay);
                    loss_sum += lv;
                    ++batch_count;
                },
                model);
        }

        ScoreSet val = detail::evaluate(model, bags, val_records);
        EpochStats es;
        es.train_loss = loss_sum / static_cast<double>(batch_count);
        es.val_auroc = auroc(val);
        es.val_ap = average_precision(val);
        es.lr = lr;
        result.epochs.push_back(es);

        if (es.val_auroc > best_val_auroc) {
            best_val_auroc = es.val_auroc;
            best_epoch = epoch;
            best_params.clear();
            for (const auto& p : params) best_params.push_back(*p.tensor);
        }
    }

    // Restore the best checkpoint and evaluate the test split exactly once.
    for (std::size_t pi = 0; pi < params.size(); ++pi) *params[pi].tensor = best_params[pi];
    result.best_epoch = best_epoch;
    ScoreSet test = detail::evaluate(model, bags, test_records);
    result.test_auroc = auroc(test);
    result.test_ap = average_precision(test);

    if (opts.checkpoint_path) {
        save_checkpoint(params, *opts.checkpoint_path);
        result.checkpoint_path = opts.checkpoint_path->string();
    }

    result.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

/// Convenience wrapper: evaluates stored parameters against a split. Used to
/// confirm that a saved checkpoint reproduces its recorded metrics.
inline std::pair<double, double> evaluate_split(const AggregatorConfig& cfg,
                                                const DatasetManifest& manifest,
                                                const std::filesystem::path& checkpoint,
                                                Split split,
                                                const TransMilInternals& internals = {}) {
    SeededRng dummy(0);
    detail::AnyModel model = detail::build_model(cfg, manifest.dim, dummy, internals);
    auto params = std::visit([](auto& m) { return m.parameters(); }, model);
    load_checkpoint(params, checkpoint);
    BagSource bags(manifest);
    auto records = manifest.split(split);
    ScoreSet s = detail::evaluate(model, bags, records);
    return {auroc(s), average_precision(s)};
}

}  // namespace milbench
