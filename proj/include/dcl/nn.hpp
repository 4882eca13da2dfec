#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcl/common.hpp"
#include "dcl/param_vector.hpp"

namespace dcl {

/// A minibatch of flattened inputs with per-task label indices in [0, n_out).
template <class Real>
struct Batch {
    size_t n = 0;
    size_t dim = 0;
    std::vector<Real> x; // row-major n x dim
    std::vector<int> y;  // label index within the task head, -1 if unlabeled

    const Real* row(size_t i) const { return x.data() + i * dim; }
    Real* row(size_t i) { return x.data() + i * dim; }

    static Batch zeros(size_t n_, size_t dim_) {
        Batch b;
        b.n = n_;
        b.dim = dim_;
        b.x.assign(n_ * dim_, Real(0));
        b.y.assign(n_, -1);
        return b;
    }
};

/// Row-major matrix of activations or logits.
template <class Real>
struct Mat {
    size_t rows = 0, cols = 0;
    std::vector<Real> v;

    Mat() = default;
    Mat(size_t r, size_t c) : rows(r), cols(c), v(r * c, Real(0)) {}
    Real& at(size_t r, size_t c) { return v[r * cols + c]; }
    Real at(size_t r, size_t c) const { return v[r * cols + c]; }
    const Real* row(size_t r) const { return v.data() + r * cols; }
    Real* row(size_t r) { return v.data() + r * cols; }
};

/// Nonnegative per-parameter curvature estimate aligned with a net's flat
/// parameter vector. `normalized` carries per-layer (max, temperature) once
/// normalize_fisher has run.
struct FisherDiag {
    std::vector<float> values;
    LayerMap layout;
    bool normalized = false;
    std::vector<std::pair<float, float>> layer_norm_meta; // (raw max, temperature) per layer
};

/// Per-layer normalization of a raw Fisher diagonal into [0, 1]: a softmax
/// with temperature equal to the layer mean (floored), rescaled so the layer
/// max is exactly 1. Monotone in the raw entries. An all-zero layer maps to
/// all ones (every parameter treated as maximally important).
inline FisherDiag normalize_fisher(const FisherDiag& fd) {
    FisherDiag out;
    out.values.resize(fd.values.size());
    out.layout = fd.layout;
    out.normalized = true;
    for (const auto& e : fd.layout) {
        const size_t lo = e.offset, n = e.size();
        double mx = 0.0, sum = 0.0;
        for (size_t i = 0; i < n; ++i) {
            mx = std::max(mx, static_cast<double>(fd.values[lo + i]));
            sum += fd.values[lo + i];
        }
        double temp = std::max(sum / static_cast<double>(n), 1e-8);
        // softmax(x/T) divided by its own max == exp((x - max) / T)
        for (size_t i = 0; i < n; ++i) {
            out.values[lo + i] = static_cast<float>(std::exp((static_cast<double>(fd.values[lo + i]) - mx) / temp));
        }
        out.layer_norm_meta.emplace_back(static_cast<float>(mx), static_cast<float>(temp));
    }
    return out;
}

/// Sum of quadratic attraction terms added to the local training loss:
///   loss += weight * sum_p coeff[p] * (theta[p] - anchor[p])^2
/// over a net's federated parameter view. An empty coeff means all-ones.
/// FedProx uses one term with weight mu/2; FedCurv one term per neighbor
/// weighted by that neighbor's Fisher diagonal.
template <class Real>
struct QuadraticPenalty {
    struct Term {
        Real weight = Real(0);
        std::vector<Real> anchor;
        std::vector<Real> coeff; // empty => 1 everywhere
    };
    std::vector<Term> terms;

    bool empty() const { return terms.empty(); }

    double loss(const std::vector<Real>& view) const {
        double total = 0.0;
        for (const auto& t : terms) {
            if (t.anchor.size() != view.size())
                throw std::invalid_argument("penalty anchor length mismatch");
            double s = 0.0;
            for (size_t p = 0; p < view.size(); ++p) {
                double d = static_cast<double>(view[p]) - static_cast<double>(t.anchor[p]);
                double c = t.coeff.empty() ? 1.0 : static_cast<double>(t.coeff[p]);
                s += c * d * d;
            }
            total += static_cast<double>(t.weight) * s;
        }
        return total;
    }

    void add_grad(const std::vector<Real>& view, std::vector<Real>& grad) const {
        for (const auto& t : terms) {
            for (size_t p = 0; p < view.size(); ++p) {
                double d = static_cast<double>(view[p]) - static_cast<double>(t.anchor[p]);
                double c = t.coeff.empty() ? 1.0 : static_cast<double>(t.coeff[p]);
                grad[p] += static_cast<Real>(2.0 * static_cast<double>(t.weight) * c * d);
            }
        }
    }
};

namespace detail {

template <class Real>
inline void xavier_fill(Real* w, size_t fan_in, size_t fan_out, size_t count, Rng& rng) {
    double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (size_t i = 0; i < count; ++i) w[i] = static_cast<Real>(rng.uniform(-limit, limit));
}

/// Mean cross-entropy over a batch from logits; per-row losses optional.
template <class Real>
inline double cross_entropy(const Mat<Real>& logits, const std::vector<int>& y,
                            std::vector<double>* per_row = nullptr) {
    double total = 0.0;
    size_t counted = 0;
    if (per_row) per_row->assign(logits.rows, 0.0);
    std::vector<Real> probs(logits.cols);
    for (size_t i = 0; i < logits.rows; ++i) {
        if (y[i] < 0) continue;
        softmax_row(logits.row(i), probs.data(), logits.cols);
        double p = std::max(static_cast<double>(probs[static_cast<size_t>(y[i])]), 1e-30);
        double l = -std::log(p);
        if (per_row) (*per_row)[i] = l;
        total += l;
        ++counted;
    }
    return counted ? total / static_cast<double>(counted) : 0.0;
}

} // namespace detail

/// Layer shapes supported by the engine. Conv-lite = valid 2-D convolution,
/// ReLU, then 2x2 max-pool with stride 2.
enum class LayerKind { dense, conv_lite };

template <class Real>
class MonolithicNet {
public:
    struct LayerDesc {
        LayerKind kind = LayerKind::dense;
        // dense
        size_t in = 0, out = 0;
        // conv_lite
        size_t in_ch = 0, out_ch = 0, k = 0, in_h = 0, in_w = 0;
        size_t conv_h = 0, conv_w = 0, pool_h = 0, pool_w = 0;
        size_t w_off = 0, b_off = 0;

        size_t weight_count() const {
            return kind == LayerKind::dense ? in * out : in_ch * out_ch * k * k;
        }
        size_t bias_count() const { return kind == LayerKind::dense ? out : out_ch; }
        size_t out_dim() const {
            return kind == LayerKind::dense ? out : out_ch * pool_h * pool_w;
        }
    };

    struct HeadDesc {
        size_t in = 0, out = 0;
        size_t w_off = 0, b_off = 0;
    };

    /// Dense trunk: input_dim -> hidden[0] -> ... -> hidden.back(), ReLU after
    /// each trunk layer. Heads are added per task.
    static MonolithicNet dense(size_t input_dim, const std::vector<size_t>& hidden, Rng& rng) {
        MonolithicNet net;
        net.input_dim_ = input_dim;
        size_t in = input_dim;
        for (size_t i = 0; i < hidden.size(); ++i) {
            LayerDesc d;
            d.kind = LayerKind::dense;
            d.in = in;
            d.out = hidden[i];
            net.alloc_layer(d, "trunk" + std::to_string(i), rng);
            net.trunk_.push_back(d);
            in = hidden[i];
        }
        net.feature_dim_ = in;
        net.trunk_params_ = net.params_.size();
        return net;
    }

    /// Conv trunk for C x H x W inputs: a stack of conv-lite layers followed by
    /// flattening. Input rows are channel-major (c, h, w).
    static MonolithicNet conv(size_t in_ch, size_t h, size_t w,
                              const std::vector<size_t>& channels, size_t kernel, Rng& rng) {
        MonolithicNet net;
        net.input_dim_ = in_ch * h * w;
        size_t c = in_ch, ch = h, cw = w;
        for (size_t i = 0; i < channels.size(); ++i) {
            LayerDesc d;
            d.kind = LayerKind::conv_lite;
            d.in_ch = c;
            d.out_ch = channels[i];
            d.k = kernel;
            d.in_h = ch;
            d.in_w = cw;
            if (ch < kernel || cw < kernel)
                throw std::invalid_argument("conv input smaller than kernel");
            d.conv_h = ch - kernel + 1;
            d.conv_w = cw - kernel + 1;
            d.pool_h = std::max<size_t>(1, d.conv_h / 2);
            d.pool_w = std::max<size_t>(1, d.conv_w / 2);
            net.alloc_layer(d, "trunk" + std::to_string(i), rng);
            net.trunk_.push_back(d);
            c = channels[i];
            ch = d.pool_h;
            cw = d.pool_w;
        }
        net.feature_dim_ = c * ch * cw;
        net.trunk_params_ = net.params_.size();
        return net;
    }

    size_t input_dim() const { return input_dim_; }
    size_t feature_dim() const { return feature_dim_; }
    size_t param_count() const { return params_.size(); }
    size_t trunk_param_count() const { return trunk_params_; }
    bool has_head(int task) const { return heads_.count(task) > 0; }
    size_t head_out(int task) const { return head(task).out; }

    void add_head(int task, size_t n_labels, Rng& rng) {
        if (heads_.count(task)) throw std::invalid_argument("head already exists for task");
        HeadDesc h;
        h.in = feature_dim_;
        h.out = n_labels;
        h.w_off = alloc(h.in * h.out, "head" + std::to_string(task) + ".w", {h.out, h.in});
        h.b_off = alloc(h.out, "head" + std::to_string(task) + ".b", {h.out});
        detail::xavier_fill(params_.data() + h.w_off, h.in, h.out, h.in * h.out, rng);
        heads_[task] = h;
    }

    std::vector<float>& raw_params() { return params_; }
    const std::vector<float>& raw_params() const { return params_; }

    ParamVector flatten() const {
        ParamVector pv;
        pv.values.assign(params_.begin(), params_.end());
        pv.layout = layout_;
        return pv;
    }

    void unflatten(const ParamVector& pv) {
        if (pv.values.size() != params_.size())
            throw std::invalid_argument("parameter count mismatch in unflatten");
        if constexpr (std::is_same_v<Real, float>) {
            params_ = pv.values;
        } else {
            for (size_t i = 0; i < params_.size(); ++i) params_[i] = static_cast<Real>(pv.values[i]);
        }
    }

    const LayerMap& layout() const { return layout_; }

    /// Trunk parameters: the part exchanged by full-model sharing. Heads stay
    /// local because label sets differ between agents.
    std::vector<Real> fed_view() const {
        return std::vector<Real>(params_.begin(), params_.begin() + trunk_params_);
    }

    void set_fed_view(const std::vector<Real>& v) {
        if (v.size() != trunk_params_) throw std::invalid_argument("fed view size mismatch");
        std::copy(v.begin(), v.end(), params_.begin());
    }

    /// Indices of the federated view inside the flat parameter vector.
    std::vector<size_t> fed_view_indices() const {
        std::vector<size_t> idx(trunk_params_);
        for (size_t i = 0; i < trunk_params_; ++i) idx[i] = i;
        return idx;
    }

    /// Forward pass. Returns (logits, penultimate features).
    std::pair<Mat<Real>, Mat<Real>> forward(const Batch<Real>& batch, int task) const {
        std::vector<Mat<Real>> acts;
        return forward_impl(batch, task, acts, nullptr);
    }

    Mat<Real> features(const Batch<Real>& batch) const {
        if (batch.dim != input_dim_) throw std::invalid_argument("input dimension mismatch");
        Mat<Real> a(batch.n, batch.dim);
        std::copy(batch.x.begin(), batch.x.end(), a.v.begin());
        std::vector<std::vector<size_t>> pool_idx;
        for (const auto& layer : trunk_) a = trunk_forward(layer, a, nullptr);
        return a;
    }

    /// One SGD step on cross-entropy (plus optional penalty on the federated
    /// view). Returns the pre-step loss. A non-finite loss leaves parameters
    /// untouched and raises DivergenceError.
    double sgd_step(const Batch<Real>& batch, int task, double lr,
                    const QuadraticPenalty<Real>* penalty = nullptr) {
        if (lr < 0) throw std::invalid_argument("learning rate must be nonnegative");
        std::fill(grads_.begin(), grads_.end(), Real(0));
        double loss = backward(batch, task);
        if (penalty != nullptr && !penalty->empty()) {
            std::vector<Real> view = fed_view();
            std::vector<Real> pgrad(view.size(), Real(0));
            penalty->add_grad(view, pgrad);
            loss += penalty->loss(view);
            for (size_t i = 0; i < trunk_params_; ++i) grads_[i] += pgrad[i];
        }
        if (!std::isfinite(loss)) throw DivergenceError("non-finite training loss");
        if (lr != 0.0) {
            for (size_t i = 0; i < params_.size(); ++i)
                params_[i] -= static_cast<Real>(lr) * grads_[i];
        }
        return loss;
    }

    /// Mean cross-entropy without updating parameters.
    double eval_loss(const Batch<Real>& batch, int task,
                     std::vector<double>* per_row = nullptr) const {
        auto [logits, feats] = forward(batch, task);
        (void)feats;
        return detail::cross_entropy(logits, batch.y, per_row);
    }

    /// Percent of rows whose argmax logit equals the label.
    double accuracy(const Batch<Real>& batch, int task) const {
        if (batch.n == 0) return 0.0;
        auto [logits, feats] = forward(batch, task);
        (void)feats;
        size_t hit = 0, counted = 0;
        for (size_t i = 0; i < batch.n; ++i) {
            if (batch.y[i] < 0) continue;
            size_t best = 0;
            for (size_t c = 1; c < logits.cols; ++c)
                if (logits.at(i, c) > logits.at(i, best)) best = c;
            if (static_cast<int>(best) == batch.y[i]) ++hit;
            ++counted;
        }
        return counted ? 100.0 * static_cast<double>(hit) / static_cast<double>(counted) : 0.0;
    }

    /// Empirical Fisher diagonal: mean over samples of the squared gradient of
    /// the label log-likelihood with respect to every parameter.
    FisherDiag estimate_fisher_diag(const Batch<Real>& batch, int task) {
        if (batch.n == 0) throw std::invalid_argument("fisher estimate needs data");
        std::vector<double> acc(params_.size(), 0.0);
        Batch<Real> one = Batch<Real>::zeros(1, batch.dim);
        size_t counted = 0;
        for (size_t i = 0; i < batch.n; ++i) {
            if (batch.y[i] < 0) continue;
            std::copy(batch.row(i), batch.row(i) + batch.dim, one.x.begin());
            one.y[0] = batch.y[i];
            std::fill(grads_.begin(), grads_.end(), Real(0));
            backward(one, task);
            // d/dtheta log p(y|x) = -d/dtheta CE
            for (size_t p = 0; p < params_.size(); ++p) {
                double g = static_cast<double>(grads_[p]);
                acc[p] += g * g;
            }
            ++counted;
        }
        FisherDiag fd;
        fd.values.resize(params_.size());
        fd.layout = layout_;
        for (size_t p = 0; p < params_.size(); ++p)
            fd.values[p] = static_cast<float>(acc[p] / static_cast<double>(counted));
        return fd;
    }

private:
    const HeadDesc& head(int task) const {
        auto it = heads_.find(task);
        if (it == heads_.end()) throw std::out_of_range("unknown task id " + std::to_string(task));
        return it->second;
    }

    size_t alloc(size_t count, const std::string& name, std::vector<size_t> shape) {
        size_t off = params_.size();
        params_.resize(off + count, Real(0));
        grads_.resize(params_.size(), Real(0));
        layout_.push_back(LayerEntry{name, off, std::move(shape)});
        return off;
    }

    void alloc_layer(LayerDesc& d, const std::string& name, Rng& rng) {
        size_t wc = d.weight_count();
        if (d.kind == LayerKind::dense) {
            d.w_off = alloc(wc, name + ".w", {d.out, d.in});
            d.b_off = alloc(d.bias_count(), name + ".b", {d.out});
            detail::xavier_fill(params_.data() + d.w_off, d.in, d.out, wc, rng);
        } else {
            d.w_off = alloc(wc, name + ".w", {d.out_ch, d.in_ch, d.k, d.k});
            d.b_off = alloc(d.bias_count(), name + ".b", {d.out_ch});
            size_t fan_in = d.in_ch * d.k * d.k;
            size_t fan_out = d.out_ch * d.k * d.k;
            detail::xavier_fill(params_.data() + d.w_off, fan_in, fan_out, wc, rng);
        }
    }

    // Dense layer: out = relu(W x + b). Conv-lite: relu(conv(x)) then max-pool.
    // `pool_argmax` saves pooling winners for the backward pass.
    Mat<Real> trunk_forward(const LayerDesc& d, const Mat<Real>& in,
                            std::vector<size_t>* pool_argmax) const {
        if (d.kind == LayerKind::dense) {
            Mat<Real> out(in.rows, d.out);
            for (size_t r = 0; r < in.rows; ++r) {
                const Real* xr = in.row(r);
                for (size_t o = 0; o < d.out; ++o) {
                    double s = static_cast<double>(params_[d.b_off + o]);
                    const Real* wr = params_.data() + d.w_off + o * d.in;
                    for (size_t i = 0; i < d.in; ++i)
                        s += static_cast<double>(wr[i]) * static_cast<double>(xr[i]);
                    out.at(r, o) = s > 0 ? static_cast<Real>(s) : Real(0);
                }
            }
            return out;
        }
        // conv-lite
        const size_t och = d.out_ch, ich = d.in_ch, k = d.k;
        const size_t ch = d.conv_h, cw = d.conv_w, ph = d.pool_h, pw = d.pool_w;
        Mat<Real> out(in.rows, och * ph * pw);
        if (pool_argmax) pool_argmax->assign(in.rows * och * ph * pw, 0);
        for (size_t r = 0; r < in.rows; ++r) {
            const Real* xr = in.row(r); // (ich, in_h, in_w)
            for (size_t oc = 0; oc < och; ++oc) {
                // full conv map for this channel, ReLU applied
                std::vector<double> conv(ch * cw, 0.0);
                for (size_t yy = 0; yy < ch; ++yy) {
                    for (size_t xx = 0; xx < cw; ++xx) {
                        double s = static_cast<double>(params_[d.b_off + oc]);
                        for (size_t ic = 0; ic < ich; ++ic) {
                            const Real* plane = xr + ic * d.in_h * d.in_w;
                            const Real* wbase = params_.data() + d.w_off + ((oc * ich + ic) * k * k);
                            for (size_t ky = 0; ky < k; ++ky)
                                for (size_t kx = 0; kx < k; ++kx)
                                    s += static_cast<double>(wbase[ky * k + kx]) *
                                         static_cast<double>(plane[(yy + ky) * d.in_w + (xx + kx)]);
                        }
                        conv[yy * cw + xx] = s > 0 ? s : 0.0;
                    }
                }
                for (size_t py = 0; py < ph; ++py) {
                    for (size_t px = 0; px < pw; ++px) {
                        size_t best = (2 * py) * cw + (2 * px);
                        double bv = conv[best];
                        for (size_t dy = 0; dy < 2; ++dy) {
                            for (size_t dx = 0; dx < 2; ++dx) {
                                size_t yy = 2 * py + dy, xx = 2 * px + dx;
                                if (yy >= ch || xx >= cw) continue;
                                if (conv[yy * cw + xx] > bv) {
                                    bv = conv[yy * cw + xx];
                                    best = yy * cw + xx;
                                }
                            }
                        }
                        out.at(r, oc * ph * pw + py * pw + px) = static_cast<Real>(bv);
                        if (pool_argmax)
                            (*pool_argmax)[(r * och + oc) * ph * pw + py * pw + px] = best;
                    }
                }
            }
        }
        return out;
    }

    std::pair<Mat<Real>, Mat<Real>> forward_impl(const Batch<Real>& batch, int task,
                                                 std::vector<Mat<Real>>& acts,
                                                 std::vector<std::vector<size_t>>* pool_idx) const {
        if (batch.dim != input_dim_) throw std::invalid_argument("input dimension mismatch");
        const HeadDesc& h = head(task);
        Mat<Real> a(batch.n, batch.dim);
        std::copy(batch.x.begin(), batch.x.end(), a.v.begin());
        acts.clear();
        acts.push_back(a);
        for (size_t li = 0; li < trunk_.size(); ++li) {
            std::vector<size_t> argmax;
            a = trunk_forward(trunk_[li], a, pool_idx ? &argmax : nullptr);
            if (pool_idx) pool_idx->push_back(std::move(argmax));
            acts.push_back(a);
        }
        Mat<Real> logits(batch.n, h.out);
        for (size_t r = 0; r < batch.n; ++r) {
            const Real* fr = a.row(r);
            for (size_t o = 0; o < h.out; ++o) {
                double s = static_cast<double>(params_[h.b_off + o]);
                const Real* wr = params_.data() + h.w_off + o * h.in;
                for (size_t i = 0; i < h.in; ++i)
                    s += static_cast<double>(wr[i]) * static_cast<double>(fr[i]);
                logits.at(r, o) = static_cast<Real>(s);
            }
        }
        return {std::move(logits), std::move(a)};
    }

    /// Accumulates dLoss/dtheta into grads_ and returns the batch loss.
    double backward(const Batch<Real>& batch, int task) {
        std::vector<Mat<Real>> acts;
        std::vector<std::vector<size_t>> pool_idx;
        auto [logits, feats] = forward_impl(batch, task, acts, &pool_idx);
        const HeadDesc& h = head(task);

        size_t counted = 0;
        for (size_t i = 0; i < batch.n; ++i)
            if (batch.y[i] >= 0) ++counted;
        if (counted == 0) return 0.0;
        double inv_n = 1.0 / static_cast<double>(counted);

        double loss = detail::cross_entropy(logits, batch.y, nullptr);

        // dLoss/dlogit = (softmax - onehot) / n
        Mat<Real> dlogits(batch.n, h.out);
        std::vector<Real> probs(h.out);
        for (size_t i = 0; i < batch.n; ++i) {
            if (batch.y[i] < 0) continue;
            softmax_row(logits.row(i), probs.data(), h.out);
            for (size_t c = 0; c < h.out; ++c) {
                double g = static_cast<double>(probs[c]);
                if (static_cast<int>(c) == batch.y[i]) g -= 1.0;
                dlogits.at(i, c) = static_cast<Real>(g * inv_n);
            }
        }

        // head grads and gradient w.r.t. features
        const Mat<Real>& f = acts.back();
        Mat<Real> da(batch.n, h.in);
        for (size_t i = 0; i < batch.n; ++i) {
            for (size_t o = 0; o < h.out; ++o) {
                double g = static_cast<double>(dlogits.at(i, o));
                if (g == 0.0) continue;
                grads_[h.b_off + o] += static_cast<Real>(g);
                Real* wg = grads_.data() + h.w_off + o * h.in;
                const Real* wr = params_.data() + h.w_off + o * h.in;
                const Real* fr = f.row(i);
                for (size_t c = 0; c < h.in; ++c) {
                    wg[c] += static_cast<Real>(g * static_cast<double>(fr[c]));
                    da.at(i, c) += static_cast<Real>(g * static_cast<double>(wr[c]));
                }
            }
        }

        // trunk, back to front
        for (size_t li = trunk_.size(); li-- > 0;) {
            const LayerDesc& d = trunk_[li];
            const Mat<Real>& in = acts[li];
            const Mat<Real>& out = acts[li + 1];
            Mat<Real> din(in.rows, in.cols);
            if (d.kind == LayerKind::dense) {
                for (size_t r = 0; r < in.rows; ++r) {
                    for (size_t o = 0; o < d.out; ++o) {
                        if (out.at(r, o) <= 0) continue; // ReLU gate
                        double g = static_cast<double>(da.at(r, o));
                        if (g == 0.0) continue;
                        grads_[d.b_off + o] += static_cast<Real>(g);
                        Real* wg = grads_.data() + d.w_off + o * d.in;
                        const Real* wr = params_.data() + d.w_off + o * d.in;
                        const Real* xr = in.row(r);
                        for (size_t c = 0; c < d.in; ++c) {
                            wg[c] += static_cast<Real>(g * static_cast<double>(xr[c]));
                            din.at(r, c) += static_cast<Real>(g * static_cast<double>(wr[c]));
                        }
                    }
                }
            } else {
                const size_t k = d.k, ph = d.pool_h, pw = d.pool_w, cw = d.conv_w;
                const auto& argmax = pool_idx[li];
                for (size_t r = 0; r < in.rows; ++r) {
                    for (size_t oc = 0; oc < d.out_ch; ++oc) {
                        for (size_t pi = 0; pi < ph * pw; ++pi) {
                            double g = static_cast<double>(da.at(r, oc * ph * pw + pi));
                            if (g == 0.0) continue;
                            if (out.at(r, oc * ph * pw + pi) <= 0) continue; // ReLU gate
                            size_t conv_pos = argmax[(r * d.out_ch + oc) * ph * pw + pi];
                            size_t yy = conv_pos / cw, xx = conv_pos % cw;
                            grads_[d.b_off + oc] += static_cast<Real>(g);
                            const Real* xr = in.row(r);
                            for (size_t ic = 0; ic < d.in_ch; ++ic) {
                                const Real* plane = xr + ic * d.in_h * d.in_w;
                                Real* wg = grads_.data() + d.w_off + ((oc * d.in_ch + ic) * k * k);
                                const Real* wb = params_.data() + d.w_off + ((oc * d.in_ch + ic) * k * k);
                                Real* dplane = din.row(r) + ic * d.in_h * d.in_w;
                                for (size_t ky = 0; ky < k; ++ky) {
                                    for (size_t kx = 0; kx < k; ++kx) {
                                        size_t px = (yy + ky) * d.in_w + (xx + kx);
                                        wg[ky * k + kx] += static_cast<Real>(g * static_cast<double>(plane[px]));
                                        dplane[px] += static_cast<Real>(g * static_cast<double>(wb[ky * k + kx]));
                                    }
                                }
                            }
                        }
                    }
                }
            }
            da = std::move(din);
        }
        return loss;
    }

    size_t input_dim_ = 0;
    size_t feature_dim_ = 0;
    size_t trunk_params_ = 0;
    std::vector<LayerDesc> trunk_;
    std::map<int, HeadDesc> heads_;
    std::vector<Real> params_;
    std::vector<Real> grads_;
    LayerMap layout_;
};

} // namespace dcl
