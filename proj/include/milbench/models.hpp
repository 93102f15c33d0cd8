#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "milbench/nystrom.hpp"
#include "milbench/rng.hpp"
#include "milbench/tensor.hpp"

namespace milbench {

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

enum class Architecture { AttentionMil, TransMil };

inline std::string to_string(Architecture a) {
    return a == Architecture::AttentionMil ? "attention_mil" : "trans_mil";
}

inline Architecture architecture_from_string(const std::string& s) {
    if (s == "attention_mil") return Architecture::AttentionMil;
    if (s == "trans_mil") return Architecture::TransMil;
    throw ConfigError("unknown architecture '" + s + "'");
}

/// The swept hyperparameter axes, per architecture.
namespace hyper_axes {

inline const std::vector<double>& learning_rates(Architecture a) {
    static const std::vector<double> att{1e-4, 1e-3, 1e-2};
    static const std::vector<double> trans{1e-5, 1e-4, 1e-3};
    return a == Architecture::AttentionMil ? att : trans;
}

inline const std::vector<std::size_t>& bag_sizes(Architecture a) {
    static const std::vector<std::size_t> att{128, 1024, 8192};
    static const std::vector<std::size_t> trans{128, 1024, 2048};
    return a == Architecture::AttentionMil ? att : trans;
}

inline const std::vector<std::vector<std::size_t>>& attention_layer_sets() {
    static const std::vector<std::vector<std::size_t>> sets{
        {512}, {512, 384, 384}, {512, 256, 128, 64, 32}};
    return sets;
}

inline const std::vector<std::size_t>& transmil_block_counts() {
    static const std::vector<std::size_t> counts{1, 2, 3};
    return counts;
}

inline const std::vector<double>& dropouts() {
    static const std::vector<double> d{0.00, 0.25, 0.50};
    return d;
}

constexpr std::size_t kTransMilMaxBag = 2048;

}  // namespace hyper_axes

/// One grid point: architecture plus (learning rate, bag size, layers,
/// dropout). `fc_widths` carries the layers axis for AttentionMIL,
/// `blocks` for TransMIL.
struct AggregatorConfig {
    Architecture architecture = Architecture::AttentionMil;
    double learning_rate = 0.0;
    std::size_t bag_size = 0;
    std::vector<std::size_t> fc_widths;
    std::size_t blocks = 0;
    double dropout = 0.0;

    std::string layers_label() const {
        if (architecture == Architecture::TransMil) return std::to_string(blocks);
        std::ostringstream os;
        os << '(';
        for (std::size_t i = 0; i < fc_widths.size(); ++i)
            os << (i ? "," : "") << fc_widths[i];
        os << ')';
        return os.str();
    }

    void validate() const {
        auto in = [](auto v, const auto& axis) {
            return std::find(axis.begin(), axis.end(), v) != axis.end();
        };
        if (!in(learning_rate, hyper_axes::learning_rates(architecture)))
            throw ConfigError("learning rate " + std::to_string(learning_rate) +
                              " not in the grid for " + to_string(architecture));
        if (!in(bag_size, hyper_axes::bag_sizes(architecture)))
            throw ConfigError("bag size " + std::to_string(bag_size) +
                              " not in the grid for " + to_string(architecture));
        if (!in(dropout, hyper_axes::dropouts()))
            throw ConfigError("dropout " + std::to_string(dropout) + " not in the grid");
        if (architecture == Architecture::AttentionMil) {
            const auto& sets = hyper_axes::attention_layer_sets();
            if (std::find(sets.begin(), sets.end(), fc_widths) == sets.end())
                throw ConfigError("layer widths " + layers_label() + " not in the grid");
        } else {
            if (!in(blocks, hyper_axes::transmil_block_counts()))
                throw ConfigError("block count " + std::to_string(blocks) +
                                  " not in the grid");
            if (bag_size > hyper_axes::kTransMilMaxBag)
                throw ConfigError("trans_mil bag size exceeds 2048");
        }
    }
};

struct NamedParam {
    std::string name;
    Tensor* tensor;
};

/// Per-bag model output while the tape is alive. Attention weights are
/// present for AttentionMIL only.
struct ModelOutput {
    Var logits{};
    std::optional<Var> attention;
};

inline double positive_probability(const Tensor& logits) {
    double m = std::max(logits[0], logits[1]);
    double e0 = std::exp(logits[0] - m), e1 = std::exp(logits[1] - m);
    return e1 / (e0 + e1);
}

// ---------------------------------------------------------------------------
// AttentionMIL: FC stack -> tanh attention pooling -> linear head.
// Permutation invariant over tiles by construction.
// ---------------------------------------------------------------------------

class AttentionMilModel {
public:
    /// Hidden width of the attention scorer; not part of the swept grid.
    static constexpr std::size_t kDefaultAttnHidden = 128;

    AttentionMilModel(std::size_t input_dim, std::vector<std::size_t> fc_widths,
                      double dropout, SeededRng& rng,
                      std::size_t attn_hidden = kDefaultAttnHidden)
        : input_dim_(input_dim),
          widths_(std::move(fc_widths)),
          dropout_(dropout),
          attn_hidden_(attn_hidden) {
        if (widths_.empty())
            throw ConfigError("attention_mil: at least one FC layer required");
        std::size_t in = input_dim_;
        for (std::size_t w : widths_) {
            fc_w_.push_back(xavier_uniform(in, w, rng));
            fc_b_.push_back(Tensor({w}));
            in = w;
        }
        attn_v_ = xavier_uniform(in, attn_hidden_, rng);
        attn_w_ = xavier_uniform(attn_hidden_, 1, rng);
        cls_w_ = xavier_uniform(in, 2, rng);
        cls_b_ = Tensor({2});
    }

    AttentionMilModel(std::size_t input_dim, const AggregatorConfig& config,
                      SeededRng& rng)
        : AttentionMilModel(input_dim, config.fc_widths, config.dropout, rng) {}

    struct Bound {
        std::vector<Var> fc_w, fc_b;
        Var attn_v, attn_w, cls_w, cls_b;
        std::vector<Var> ordered;  // same order as parameters()
    };

    Bound bind(Tape& tape) const {
        Bound b;
        for (std::size_t i = 0; i < widths_.size(); ++i) {
            b.fc_w.push_back(tape.leaf(fc_w_[i], true));
            b.fc_b.push_back(tape.leaf(fc_b_[i], true));
            b.ordered.push_back(b.fc_w.back());
            b.ordered.push_back(b.fc_b.back());
        }
        b.attn_v = tape.leaf(attn_v_, true);
        b.attn_w = tape.leaf(attn_w_, true);
        b.cls_w = tape.leaf(cls_w_, true);
        b.cls_b = tape.leaf(cls_b_, true);
        b.ordered.insert(b.ordered.end(), {b.attn_v, b.attn_w, b.cls_w, b.cls_b});
        return b;
    }

    /// bag: [n,D]. Attention weights form a probability vector over tiles.
    ModelOutput forward(Tape& tape, const Bound& b, Var bag, bool training,
                        SeededRng& rng) const {
        const Tensor& bv = bag.value();
        if (bv.rank() != 2 || bv.cols() != input_dim_)
            throw DimensionError("attention_mil: bag " + bv.shape_str() +
                                 " does not match input dim " +
                                 std::to_string(input_dim_));
        Var h = bag;
        for (std::size_t i = 0; i < widths_.size(); ++i) {
            h = relu(add_rowvec(matmul(h, b.fc_w[i]), b.fc_b[i]));
            h = dropout(h, dropout_, training, rng);
        }
        Var scores = matmul(milbench::tanh(matmul(h, b.attn_v)), b.attn_w);  // [n,1]
        Var attn = row_softmax(transpose(scores));                           // [1,n]
        Var pooled = matmul(attn, h);                                        // [1,L]
        Var logits = add_rowvec(matmul(pooled, b.cls_w), b.cls_b);           // [1,2]
        return ModelOutput{logits, attn};
    }

    std::vector<NamedParam> parameters() {
        std::vector<NamedParam> ps;
        for (std::size_t i = 0; i < widths_.size(); ++i) {
            ps.push_back({"fc" + std::to_string(i) + ".w", &fc_w_[i]});
            ps.push_back({"fc" + std::to_string(i) + ".b", &fc_b_[i]});
        }
        ps.push_back({"attn.v", &attn_v_});
        ps.push_back({"attn.w", &attn_w_});
        ps.push_back({"cls.w", &cls_w_});
        ps.push_back({"cls.b", &cls_b_});
        return ps;
    }

    std::size_t parameter_count() {
        std::size_t n = 0;
        for (const auto& p : parameters()) n += p.tensor->size();
        return n;
    }

    std::size_t input_dim() const { return input_dim_; }

private:
    std::size_t input_dim_;
    std::vector<std::size_t> widths_;
    double dropout_;
    std::size_t attn_hidden_;
    std::vector<Tensor> fc_w_, fc_b_;
    Tensor attn_v_, attn_w_, cls_w_, cls_b_;
};

// ---------------------------------------------------------------------------
// TransMIL: projection -> square pad -> class token -> pre-norm Nyström
// attention blocks with residuals, PPEG between blocks -> final norm ->
// linear head on the class token.
// ---------------------------------------------------------------------------

/// Constants that are not part of the swept grid.
struct TransMilInternals {
    std::size_t d_model = 512;
    std::size_t landmarks = 256;  // capped at sequence length per forward
    int pinv_iters = 6;
};

class TransMilModel {
public:
    static constexpr std::size_t kMaxBag = hyper_axes::kTransMilMaxBag;

    TransMilModel(std::size_t input_dim, std::size_t blocks, double dropout,
                  SeededRng& rng, TransMilInternals internals = {})
        : input_dim_(input_dim),
          blocks_(blocks),
          dropout_(dropout),
          internals_(internals) {
        if (blocks_ < 1) throw ConfigError("trans_mil: block count must be >= 1");
        std::size_t d = internals_.d_model;
        in_w_ = xavier_uniform(input_dim_, d, rng);
        in_b_ = Tensor({d});
        cls_token_ = normal_init({1, d}, 0.02, rng);
        for (std::size_t bidx = 0; bidx < blocks_; ++bidx) {
            BlockParams bp;
            bp.ln_gain = Tensor::full({d}, 1.0);
            bp.ln_bias = Tensor({d});
            bp.wq = xavier_uniform(d, d, rng);
            bp.wk = xavier_uniform(d, d, rng);
            bp.wv = xavier_uniform(d, d, rng);
            bp.wo = xavier_uniform(d, d, rng);
            bp.wo_b = Tensor({d});
            block_.push_back(std::move(bp));
        }
        // PPEG after every block except the last; kernels start at zero so
        // each placement begins as the identity.
        for (std::size_t pidx = 0; pidx + 1 < blocks_; ++pidx) {
            PpegParams pp;
            pp.k3 = Tensor({9, d});
            pp.k5 = Tensor({25, d});
            pp.k7 = Tensor({49, d});
            ppeg_.push_back(std::move(pp));
        }
        final_gain_ = Tensor::full({d}, 1.0);
        final_bias_ = Tensor({d});
        cls_w_ = xavier_uniform(d, 2, rng);
        cls_b_ = Tensor({2});
    }

    TransMilModel(std::size_t input_dim, const AggregatorConfig& config,
                  SeededRng& rng, TransMilInternals internals = {})
        : TransMilModel(input_dim, config.blocks, config.dropout, rng, internals) {}

    struct Bound {
        Var in_w, in_b, cls_token;
        struct B { Var ln_gain, ln_bias, wq, wk, wv, wo, wo_b; };
        struct P { Var k3, k5, k7; };
        std::vector<B> block;
        std::vector<P> ppeg;
        Var final_gain, final_bias, cls_w, cls_b;
        std::vector<Var> ordered;
    };

    Bound bind(Tape& tape) const {
        Bound b;
        auto reg = [&](const Tensor& t) {
            Var v = tape.leaf(t, true);
            b.ordered.push_back(v);
            return v;
        };
        b.in_w = reg(in_w_);
        b.in_b = reg(in_b_);
        b.cls_token = reg(cls_token_);
        for (const auto& bp : block_) {
            Bound::B bb;
            bb.ln_gain = reg(bp.ln_gain);
            bb.ln_bias = reg(bp.ln_bias);
            bb.wq = reg(bp.wq);
            bb.wk = reg(bp.wk);
            bb.wv = reg(bp.wv);
            bb.wo = reg(bp.wo);
            bb.wo_b = reg(bp.wo_b);
            b.block.push_back(bb);
        }
        for (const auto& pp : ppeg_) {
            Bound::P bp;
            bp.k3 = reg(pp.k3);
            bp.k5 = reg(pp.k5);
            bp.k7 = reg(pp.k7);
            b.ppeg.push_back(bp);
        }
        b.final_gain = reg(final_gain_);
        b.final_bias = reg(final_bias_);
        b.cls_w = reg(cls_w_);
        b.cls_b = reg(cls_b_);
        return b;
    }

    /// bag: [n,D], 1 <= n <= 2048.
    ModelOutput forward(Tape& tape, const Bound& b, Var bag, bool training,
                        SeededRng& rng) const {
        const Tensor& bv = bag.value();
        if (bv.rank() != 2 || bv.cols() != input_dim_)
            throw DimensionError("trans_mil: bag " + bv.shape_str() +
                                 " does not match input dim " +
                                 std::to_string(input_dim_));
        std::size_t n = bv.rows();
        if (n > kMaxBag)
            throw DimensionError("trans_mil: bag of " + std::to_string(n) +
                                 " tiles exceeds the 2048 cap");
        Var h = add_rowvec(matmul(bag, b.in_w), b.in_b);
        h = square_pad(h);
        std::size_t padded = h.value().rows();
        std::size_t side = static_cast<std::size_t>(std::llround(
            std::sqrt(static_cast<double>(padded))));
        Var seq = concat_rows(b.cls_token, h);
        std::size_t seq_len = padded + 1;
        std::size_t landmarks = std::min(internals_.landmarks, seq_len);

        for (std::size_t bidx = 0; bidx < blocks_; ++bidx) {
            const auto& bb = b.block[bidx];
            Var y = layer_norm(seq, bb.ln_gain, bb.ln_bias);
            Var attn = nystrom_attention(matmul(y, bb.wq), matmul(y, bb.wk),
                                         matmul(y, bb.wv), landmarks,
                                         internals_.pinv_iters);
            attn = add_rowvec(matmul(attn, bb.wo), bb.wo_b);
            attn = dropout(attn, dropout_, training, rng);
            seq = add(seq, attn);
            if (bidx + 1 < blocks_) {
                const auto& pp = b.ppeg[bidx];
                Var cls = slice_rows(seq, 0, 1);
                Var toks = ppeg(slice_rows(seq, 1, seq_len), pp.k3, pp.k5, pp.k7, side);
                seq = concat_rows(cls, toks);
            }
        }
        seq = layer_norm(seq, b.final_gain, b.final_bias);
        Var cls = dropout(slice_rows(seq, 0, 1), dropout_, training, rng);
        Var logits = add_rowvec(matmul(cls, b.cls_w), b.cls_b);
        return ModelOutput{logits, std::nullopt};
    }

    std::vector<NamedParam> parameters() {
        std::vector<NamedParam> ps;
        ps.push_back({"in.w", &in_w_});
        ps.push_back({"in.b", &in_b_});
        ps.push_back({"cls_token", &cls_token_});
        for (std::size_t i = 0; i < block_.size(); ++i) {
            auto& bp = block_[i];
            std::string pre = "block" + std::to_string(i) + ".";
            ps.push_back({pre + "ln.gain", &bp.ln_gain});
            ps.push_back({pre + "ln.bias", &bp.ln_bias});
            ps.push_back({pre + "wq", &bp.wq});
            ps.push_back({pre + "wk", &bp.wk});
            ps.push_back({pre + "wv", &bp.wv});
            ps.push_back({pre + "wo", &bp.wo});
            ps.push_back({pre + "wo.b", &bp.wo_b});
        }
        for (std::size_t i = 0; i < ppeg_.size(); ++i) {
            auto& pp = ppeg_[i];
            std::string pre = "ppeg" + std::to_string(i) + ".";
            ps.push_back({pre + "k3", &pp.k3});
            ps.push_back({pre + "k5", &pp.k5});
            ps.push_back({pre + "k7", &pp.k7});
        }
        ps.push_back({"final_ln.gain", &final_gain_});
        ps.push_back({"final_ln.bias", &final_bias_});
        ps.push_back({"cls.w", &cls_w_});
        ps.push_back({"cls.b", &cls_b_});
        return ps;
    }

    std::size_t parameter_count() {
        std::size_t n = 0;
        for (const auto& p : parameters()) n += p.tensor->size();
        return n;
    }

    std::size_t input_dim() const { return input_dim_; }
    const TransMilInternals& internals() const { return internals_; }

private:
    struct BlockParams {
        Tensor ln_gain, ln_bias, wq, wk, wv, wo, wo_b;
    };
    struct PpegParams {
        Tensor k3, k5, k7;
    };

    std::size_t input_dim_;
    std::size_t blocks_;
    double dropout_;
    TransMilInternals internals_;
    Tensor in_w_, in_b_, cls_token_;
    std::vector<BlockParams> block_;
    std::vector<PpegParams> ppeg_;
    Tensor final_gain_, final_bias_, cls_w_, cls_b_;
};

}  // namespace milbench
