#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcl/common.hpp"
#include "dcl/nn.hpp"
#include "dcl/param_vector.hpp"

namespace dcl {

struct ModuleId {
    uint16_t origin_agent = 0;
    uint16_t birth_task = 0;
    uint32_t serial = 0;

    friend bool operator==(const ModuleId&, const ModuleId&) = default;
    friend auto operator<=>(const ModuleId&, const ModuleId&) = default;
};

/// A self-contained reusable block: one dense width x width layer with bias,
/// or one conv-lite block (c -> c channels) for the image family. Modules at
/// the same depth family share the parameter block shape, so any module can
/// stand in for any other inside a composition.
template <class Real>
struct Module {
    ModuleId id;
    LayerKind kind = LayerKind::dense;
    size_t width = 0;          // dense: in == out == width
    size_t ch = 0, k = 0;      // conv-lite: in_ch == out_ch == ch, kernel k
    bool born_via_dropout = false;
    std::vector<Real> w;
    std::vector<Real> b;

    size_t param_count() const { return w.size() + b.size(); }

    static Module dense_random(size_t width, Rng& rng) {
        Module m;
        m.kind = LayerKind::dense;
        m.width = width;
        m.w.resize(width * width);
        m.b.assign(width, Real(0));
        detail::xavier_fill(m.w.data(), width, width, m.w.size(), rng);
        return m;
    }

    static Module conv_random(size_t ch, size_t k, Rng& rng) {
        Module m;
        m.kind = LayerKind::conv_lite;
        m.ch = ch;
        m.k = k;
        m.w.resize(ch * ch * k * k);
        m.b.assign(ch, Real(0));
        detail::xavier_fill(m.w.data(), ch * k * k, ch * k * k, m.w.size(), rng);
        return m;
    }
};

/// Spatial extent of an activation as it flows through conv-lite blocks.
struct FeatShape {
    size_t ch = 0, h = 0, w = 0; // dense activations use ch = width, h = w = 1
    size_t total() const { return ch * h * w; }
};

namespace detail {

// Single-sample dense module: out = relu(W x + b), square weight matrix.
template <class Real>
inline void module_dense_forward(const Module<Real>& m, const Real* in, Real* out) {
    for (size_t o = 0; o < m.width; ++o) {
        double s = static_cast<double>(m.b[o]);
        const Real* wr = m.w.data() + o * m.width;
        for (size_t i = 0; i < m.width; ++i)
            s += static_cast<double>(wr[i]) * static_cast<double>(in[i]);
        out[o] = s > 0 ? static_cast<Real>(s) : Real(0);
    }
}

// dout is gated by relu (out > 0). Accumulates into wg/bg when given and into
// din always.
template <class Real>
inline void module_dense_backward(const Module<Real>& m, const Real* in, const Real* out,
                                  const Real* dout, Real* din, Real* wg, Real* bg) {
    for (size_t o = 0; o < m.width; ++o) {
        if (out[o] <= 0) continue;
        double g = static_cast<double>(dout[o]);
        if (g == 0.0) continue;
        if (bg) bg[o] += static_cast<Real>(g);
        const Real* wr = m.w.data() + o * m.width;
        Real* wgr = wg ? wg + o * m.width : nullptr;
        for (size_t i = 0; i < m.width; ++i) {
            if (wgr) wgr[i] += static_cast<Real>(g * static_cast<double>(in[i]));
            din[i] += static_cast<Real>(g * static_cast<double>(wr[i]));
        }
    }
}

// Conv-lite module on a (ch, h, w) input: valid conv, relu, 2x2 max-pool.
// argmax records pooling winners (conv-plane positions) for the backward pass.
template <class Real>
inline FeatShape conv_out_shape(size_t ch, size_t h, size_t w, size_t k) {
    if (h < k || w < k) throw std::invalid_argument("conv module input smaller than kernel");
    size_t cH = h - k + 1, cW = w - k + 1;
    return FeatShape{ch, std::max<size_t>(1, cH / 2), std::max<size_t>(1, cW / 2)};
}

template <class Real>
inline void module_conv_forward(const Module<Real>& m, const Real* in, const FeatShape& is,
                                Real* out, std::vector<size_t>& argmax) {
    size_t cH = is.h - m.k + 1, cW = is.w - m.k + 1;
    FeatShape os = conv_out_shape<Real>(m.ch, is.h, is.w, m.k);
    argmax.assign(os.total(), 0);
    std::vector<double> conv(cH * cW);
    for (size_t oc = 0; oc < m.ch; ++oc) {
        for (size_t yy = 0; yy < cH; ++yy) {
            for (size_t xx = 0; xx < cW; ++xx) {
                double s = static_cast<double>(m.b[oc]);
                for (size_t ic = 0; ic < m.ch; ++ic) {
                    const Real* plane = in + ic * is.h * is.w;
                    const Real* wb = m.w.data() + (oc * m.ch + ic) * m.k * m.k;
                    for (size_t ky = 0; ky < m.k; ++ky)
                        for (size_t kx = 0; kx < m.k; ++kx)
                            s += static_cast<double>(wb[ky * m.k + kx]) *
                                 static_cast<double>(plane[(yy + ky) * is.w + (xx + kx)]);
                }
                conv[yy * cW + xx] = s > 0 ? s : 0.0;
            }
        }
        for (size_t py = 0; py < os.h; ++py) {
            for (size_t px = 0; px < os.w; ++px) {
                size_t best = (2 * py) * cW + (2 * px);
                double bv = conv[best];
                for (size_t dy = 0; dy < 2; ++dy)
                    for (size_t dx = 0; dx < 2; ++dx) {
                        size_t yy = 2 * py + dy, xx = 2 * px + dx;
                        if (yy >= cH || xx >= cW) continue;
                        if (conv[yy * cW + xx] > bv) {
                            bv = conv[yy * cW + xx];
                            best = yy * cW + xx;
                        }
                    }
                out[oc * os.h * os.w + py * os.w + px] = static_cast<Real>(bv);
                argmax[oc * os.h * os.w + py * os.w + px] = best;
            }
        }
    }
}

template <class Real>
inline void module_conv_backward(const Module<Real>& m, const Real* in, const FeatShape& is,
                                 const Real* out, const Real* dout,
                                 const std::vector<size_t>& argmax, Real* din, Real* wg, Real* bg) {
    size_t cW = is.w - m.k + 1;
    FeatShape os = conv_out_shape<Real>(m.ch, is.h, is.w, m.k);
    for (size_t oc = 0; oc < m.ch; ++oc) {
        for (size_t pi = 0; pi < os.h * os.w; ++pi) {
            size_t oi = oc * os.h * os.w + pi;
            if (out[oi] <= 0) continue;
            double g = static_cast<double>(dout[oi]);
            if (g == 0.0) continue;
            if (bg) bg[oc] += static_cast<Real>(g);
            size_t pos = argmax[oi];
            size_t yy = pos / cW, xx = pos % cW;
            for (size_t ic = 0; ic < m.ch; ++ic) {
                const Real* plane = in + ic * is.h * is.w;
                const Real* wb = m.w.data() + (oc * m.ch + ic) * m.k * m.k;
                Real* wgr = wg ? wg + (oc * m.ch + ic) * m.k * m.k : nullptr;
                Real* dplane = din + ic * is.h * is.w;
                for (size_t ky = 0; ky < m.k; ++ky) {
                    for (size_t kx = 0; kx < m.k; ++kx) {
                        size_t px = (yy + ky) * is.w + (xx + kx);
                        if (wgr) wgr[ky * m.k + kx] += static_cast<Real>(g * static_cast<double>(plane[px]));
                        dplane[px] += static_cast<Real>(g * static_cast<double>(wb[ky * m.k + kx]));
                    }
                }
            }
        }
    }
}

} // namespace detail

/// Module wire format: origin u16, birth task u16, serial u32, kind u8,
/// dropout flag u8, dim count u16, dims u32 each, then the little-endian
/// float block (weights, then biases). The float cost of the payload is the
/// module parameter count.
template <class Real>
inline std::vector<uint8_t> serialize_module(const Module<Real>& m) {
    std::vector<uint8_t> out;
    out.push_back(static_cast<uint8_t>(m.id.origin_agent & 0xff));
    out.push_back(static_cast<uint8_t>(m.id.origin_agent >> 8));
    out.push_back(static_cast<uint8_t>(m.id.birth_task & 0xff));
    out.push_back(static_cast<uint8_t>(m.id.birth_task >> 8));
    append_u32_le(out, m.id.serial);
    out.push_back(m.kind == LayerKind::dense ? 0 : 1);
    out.push_back(m.born_via_dropout ? 1 : 0);
    std::vector<uint32_t> dims;
    if (m.kind == LayerKind::dense) {
        dims = {static_cast<uint32_t>(m.width)};
    } else {
        dims = {static_cast<uint32_t>(m.ch), static_cast<uint32_t>(m.k)};
    }
    out.push_back(static_cast<uint8_t>(dims.size() & 0xff));
    out.push_back(static_cast<uint8_t>(dims.size() >> 8));
    for (uint32_t d : dims) append_u32_le(out, d);
    for (Real v : m.w) append_f32_le(out, static_cast<float>(v));
    for (Real v : m.b) append_f32_le(out, static_cast<float>(v));
    return out;
}

template <class Real>
inline Module<Real> deserialize_module(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 12) throw std::invalid_argument("module payload truncated");
    const uint8_t* p = bytes.data();
    Module<Real> m;
    m.id.origin_agent = static_cast<uint16_t>(p[0] | (p[1] << 8));
    m.id.birth_task = static_cast<uint16_t>(p[2] | (p[3] << 8));
    m.id.serial = read_u32_le(p + 4);
    m.kind = p[8] == 0 ? LayerKind::dense : LayerKind::conv_lite;
    m.born_via_dropout = p[9] != 0;
    uint16_t ndims = static_cast<uint16_t>(p[10] | (p[11] << 8));
    size_t off = 12;
    if (bytes.size() < off + 4ull * ndims) throw std::invalid_argument("module payload truncated");
    std::vector<uint32_t> dims(ndims);
    for (uint16_t i = 0; i < ndims; ++i) {
        dims[i] = read_u32_le(p + off);
        off += 4;
    }
    size_t wc, bc;
    if (m.kind == LayerKind::dense) {
        if (ndims != 1) throw std::invalid_argument("bad dense module dims");
        m.width = dims[0];
        wc = m.width * m.width;
        bc = m.width;
    } else {
        if (ndims != 2) throw std::invalid_argument("bad conv module dims");
        m.ch = dims[0];
        m.k = dims[1];
        wc = m.ch * m.ch * m.k * m.k;
        bc = m.ch;
    }
    if (bytes.size() != off + 4ull * (wc + bc))
        throw std::invalid_argument("module payload length mismatch");
    m.w.resize(wc);
    m.b.resize(bc);
    for (size_t i = 0; i < wc; ++i, off += 4) m.w[i] = static_cast<Real>(read_f32_le(p + off));
    for (size_t i = 0; i < bc; ++i, off += 4) m.b[i] = static_cast<Real>(read_f32_le(p + off));
    return m;
}

/// Compositional net: at every depth the activation is the structure-softmax
/// convex combination of all visible library modules applied to the previous
/// activation. Structure weights and the output head are per task; a task only
/// sees the modules that existed when its structure was last trained, so
/// growing the library leaves old task outputs untouched until retraining.
template <class Real>
class ModularNet {
public:
    static constexpr Real kNewColumnInit = Real(-10); // ~0 softmax mass

    struct TaskState {
        size_t span = 0;                 // visible library prefix
        std::vector<Real> structure;     // depth x span, row-major
        std::vector<Real> head_w;        // out x feat
        std::vector<Real> head_b;        // out
        size_t n_out = 0;
    };

    /// Dense family: modules act directly on the input vector, width ==
    /// input dimension, no encoder.
    static ModularNet dense(size_t input_dim, size_t depth, size_t n_basis, Rng& basis_rng,
                            uint16_t owner) {
        ModularNet net;
        net.owner_ = owner;
        net.kind_ = LayerKind::dense;
        net.input_shape_ = FeatShape{input_dim, 1, 1};
        net.depth_ = depth;
        for (size_t i = 0; i < n_basis; ++i) {
            auto m = Module<Real>::dense_random(input_dim, basis_rng);
            m.id = ModuleId{owner, 0, net.next_serial_++};
            net.library_.push_back(std::move(m));
        }
        net.n_basis_ = n_basis;
        return net;
    }

    /// Image family: a frozen conv-lite encoder lifts C x H x W input into the
    /// module channel width; modules are conv-lite blocks.
    static ModularNet conv(size_t in_ch, size_t h, size_t w, size_t ch, size_t kernel,
                           size_t depth, size_t n_basis, Rng& basis_rng, uint16_t owner) {
        ModularNet net;
        net.owner_ = owner;
        net.kind_ = LayerKind::conv_lite;
        net.depth_ = depth;
        net.input_shape_ = FeatShape{in_ch, h, w};
        net.encoder_ = Module<Real>::conv_random(ch, kernel, basis_rng);
        net.encoder_->ch = ch;
        // encoder maps in_ch -> ch, so its weight block is ch x in_ch x k x k
        net.encoder_->w.resize(ch * in_ch * kernel * kernel);
        detail::xavier_fill(net.encoder_->w.data(), in_ch * kernel * kernel,
                            ch * kernel * kernel, net.encoder_->w.size(), basis_rng);
        net.encoder_in_ch_ = in_ch;
        for (size_t i = 0; i < n_basis; ++i) {
            auto m = Module<Real>::conv_random(ch, kernel, basis_rng);
            m.id = ModuleId{owner, 0, net.next_serial_++};
            net.library_.push_back(std::move(m));
        }
        net.n_basis_ = n_basis;
        return net;
    }

    uint16_t owner() const { return owner_; }
    LayerKind family() const { return kind_; }
    size_t depth() const { return depth_; }
    size_t n_basis() const { return n_basis_; }
    size_t library_size() const { return library_.size(); }
    const Module<Real>& module_at(size_t i) const { return library_[i]; }
    const std::vector<Module<Real>>& library() const { return library_; }
    size_t input_dim() const { return input_shape_.total(); }
    bool has_task(int task) const { return tasks_.count(task) > 0; }
    std::vector<int> task_ids() const {
        std::vector<int> out;
        for (const auto& [t, s] : tasks_) out.push_back(t);
        return out;
    }
    const TaskState& task_state(int task) const { return state(task); }

    size_t feature_dim() const {
        FeatShape s = module_input_shape();
        for (size_t d = 0; d < depth_; ++d) s = shape_after_module(s);
        return s.total();
    }

    /// Parameter count of one library module (M in the sharing cost model).
    size_t module_param_count() const {
        return library_.empty() ? 0 : library_[0].param_count();
    }

    void add_task(int task, size_t n_labels, Rng& rng) {
        if (tasks_.count(task)) throw std::invalid_argument("task already present");
        TaskState ts;
        ts.span = library_.size();
        ts.structure.assign(depth_ * ts.span, Real(0));
        ts.n_out = n_labels;
        size_t feat = feature_dim();
        ts.head_w.resize(n_labels * feat);
        ts.head_b.assign(n_labels, Real(0));
        detail::xavier_fill(ts.head_w.data(), feat, n_labels, ts.head_w.size(), rng);
        tasks_[task] = std::move(ts);
    }

    /// Inserts a trained module into the library. Existing tasks keep their
    /// span, so their outputs are bit-identical until their structure is
    /// extended and retrained.
    ModuleId add_module(Module<Real> m, uint16_t birth_task, bool via_dropout) {
        m.id = ModuleId{owner_, birth_task, next_serial_++};
        m.born_via_dropout = via_dropout;
        library_.push_back(std::move(m));
        return library_.back().id;
    }

    /// Grows a task's structure to the current library, new columns at the
    /// near-zero-mass init so behaviour is preserved until fine-tuning.
    void extend_task_structure(int task) {
        TaskState& ts = state(task);
        if (ts.span == library_.size()) return;
        size_t new_span = library_.size();
        std::vector<Real> s(depth_ * new_span, kNewColumnInit);
        for (size_t d = 0; d < depth_; ++d)
            for (size_t m = 0; m < ts.span; ++m) s[d * new_span + m] = ts.structure[d * ts.span + m];
        ts.structure = std::move(s);
        ts.span = new_span;
    }

    /// Candidate overlay used during component dropout: the candidate module
    /// appears as one extra column with its own structure weights and head.
    struct Trial {
        Module<Real> candidate;
        std::vector<Real> structure; // depth x (span + 1)
        std::vector<Real> head_w;
        std::vector<Real> head_b;
        size_t span = 0; // base span (without candidate)
        size_t n_out = 0;
    };

    Trial make_trial(int task, const Module<Real>& candidate) const {
        const TaskState& ts = state(task);
        check_module_shape(candidate);
        Trial tr;
        tr.candidate = candidate;
        tr.span = ts.span;
        tr.n_out = ts.n_out;
        tr.structure.assign(depth_ * (ts.span + 1), Real(0));
        for (size_t d = 0; d < depth_; ++d)
            for (size_t m = 0; m < ts.span; ++m)
                tr.structure[d * (ts.span + 1) + m] = ts.structure[d * ts.span + m];
        tr.head_w = ts.head_w;
        tr.head_b = ts.head_b;
        return tr;
    }

    std::pair<Mat<Real>, Mat<Real>> forward(const Batch<Real>& batch, int task) const {
        const TaskState& ts = state(task);
        return forward_cfg(batch, ts.structure, ts.span, ts.span, nullptr, ts.head_w, ts.head_b,
                           ts.n_out, nullptr);
    }

    Mat<Real> features(const Batch<Real>& batch, int task) const {
        const TaskState& ts = state(task);
        Caches c;
        run_trunk(batch, ts.structure, ts.span, ts.span, nullptr, c);
        return c.acts.back();
    }

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

    double eval_loss(const Batch<Real>& batch, int task, std::vector<double>* per_row = nullptr) const {
        auto [logits, feats] = forward(batch, task);
        (void)feats;
        return detail::cross_entropy(logits, batch.y, per_row);
    }

    /// One SGD step on the committed task state. Trains the structure row and
    /// head; `train_module` additionally trains that library module (the one
    /// born on this task). A penalty applies to the federated view.
    double sgd_step(const Batch<Real>& batch, int task, double lr,
                    std::optional<size_t> train_module = std::nullopt,
                    const QuadraticPenalty<Real>* penalty = nullptr) {
        TaskState& ts = state(task);
        StepGrads g;
        double loss = backward_cfg(batch, ts.structure, ts.span, ts.span, nullptr, ts.head_w,
                                   ts.head_b, ts.n_out, train_module, g);
        std::vector<Real> view;
        std::vector<Real> pgrad;
        if (penalty != nullptr && !penalty->empty()) {
            view = fed_view(task);
            pgrad.assign(view.size(), Real(0));
            penalty->add_grad(view, pgrad);
            loss += penalty->loss(view);
        }
        if (!std::isfinite(loss)) throw DivergenceError("non-finite training loss");
        if (lr != 0.0) {
            apply_grads(ts, g, lr, train_module);
            if (!pgrad.empty()) apply_fed_penalty_grads(task, pgrad, lr);
        }
        return loss;
    }

    /// Federated view: basis module parameters, then the current task's
    /// structure columns for the basis modules (depth-major).
    std::vector<Real> fed_view(int task) const {
        const TaskState& ts = state(task);
        std::vector<Real> v;
        for (size_t m = 0; m < n_basis_; ++m) {
            v.insert(v.end(), library_[m].w.begin(), library_[m].w.end());
            v.insert(v.end(), library_[m].b.begin(), library_[m].b.end());
        }
        for (size_t d = 0; d < depth_; ++d)
            for (size_t m = 0; m < n_basis_; ++m) v.push_back(ts.structure[d * ts.span + m]);
        return v;
    }

    void set_fed_view(int task, const std::vector<Real>& v) {
        TaskState& ts = state(task);
        size_t expect = fed_view_size();
        if (v.size() != expect) throw std::invalid_argument("fed view size mismatch");
        size_t off = 0;
        for (size_t m = 0; m < n_basis_; ++m) {
            std::copy(v.begin() + off, v.begin() + off + library_[m].w.size(), library_[m].w.begin());
            off += library_[m].w.size();
            std::copy(v.begin() + off, v.begin() + off + library_[m].b.size(), library_[m].b.begin());
            off += library_[m].b.size();
        }
        for (size_t d = 0; d < depth_; ++d)
            for (size_t m = 0; m < n_basis_; ++m) ts.structure[d * ts.span + m] = v[off++];
    }

    size_t fed_view_size() const {
        size_t s = 0;
        for (size_t m = 0; m < n_basis_; ++m) s += library_[m].param_count();
        return s + depth_ * n_basis_;
    }

    ParamVector flatten() const {
        ParamVector pv;
        auto push = [&pv](const std::string& name, const std::vector<Real>& vals,
                          std::vector<size_t> shape) {
            LayerEntry e;
            e.name = name;
            e.offset = pv.values.size();
            e.shape = std::move(shape);
            pv.layout.push_back(e);
            for (Real v : vals) pv.values.push_back(static_cast<float>(v));
        };
        if (encoder_) {
            push("encoder.w", encoder_->w, {encoder_->ch, encoder_in_ch_, encoder_->k, encoder_->k});
            push("encoder.b", encoder_->b, {encoder_->ch});
        }
        for (size_t m = 0; m < library_.size(); ++m) {
            const auto& mod = library_[m];
            if (mod.kind == LayerKind::dense) {
                push("module" + std::to_string(m) + ".w", mod.w, {mod.width, mod.width});
            } else {
                push("module" + std::to_string(m) + ".w", mod.w, {mod.ch, mod.ch, mod.k, mod.k});
            }
            push("module" + std::to_string(m) + ".b", mod.b, {mod.b.size()});
        }
        for (const auto& [t, ts] : tasks_) {
            push("structure" + std::to_string(t), ts.structure, {depth_, ts.span});
            push("head" + std::to_string(t) + ".w", ts.head_w, {ts.n_out, ts.head_w.size() / std::max<size_t>(1, ts.n_out)});
            push("head" + std::to_string(t) + ".b", ts.head_b, {ts.n_out});
        }
        return pv;
    }

    /// Indices of fed_view(task) entries inside flatten() order.
    std::vector<size_t> fed_view_indices(int task) const {
        ParamVector pv = flatten();
        std::vector<size_t> idx;
        auto find = [&pv](const std::string& name) -> const LayerEntry& {
            for (const auto& e : pv.layout)
                if (e.name == name) return e;
            throw std::logic_error("missing layout entry " + name);
        };
        for (size_t m = 0; m < n_basis_; ++m) {
            const auto& we = find("module" + std::to_string(m) + ".w");
            for (size_t i = 0; i < we.size(); ++i) idx.push_back(we.offset + i);
            const auto& be = find("module" + std::to_string(m) + ".b");
            for (size_t i = 0; i < be.size(); ++i) idx.push_back(be.offset + i);
        }
        const TaskState& ts = state(task);
        const auto& se = find("structure" + std::to_string(task));
        for (size_t d = 0; d < depth_; ++d)
            for (size_t m = 0; m < n_basis_; ++m) idx.push_back(se.offset + d * ts.span + m);
        return idx;
    }

    /// Empirical Fisher diagonal over all parameters, aligned with flatten().
    FisherDiag estimate_fisher_diag(const Batch<Real>& batch, int task) {
        if (batch.n == 0) throw std::invalid_argument("fisher estimate needs data");
        const TaskState& ts = state(task);
        FisherAccum accum = make_fisher_accum();
        Batch<Real> one = Batch<Real>::zeros(1, batch.dim);
        size_t counted = 0;
        for (size_t i = 0; i < batch.n; ++i) {
            if (batch.y[i] < 0) continue;
            std::copy(batch.row(i), batch.row(i) + batch.dim, one.x.begin());
            one.y[0] = batch.y[i];
            StepGrads g;
            g.all_modules = true;
            backward_cfg(one, ts.structure, ts.span, ts.span, nullptr, ts.head_w, ts.head_b,
                         ts.n_out, std::nullopt, g);
            accumulate_fisher(accum, g, task);
            ++counted;
        }
        return finish_fisher(accum, counted, task);
    }

    /// Forward with a candidate overlay (component dropout). When `masked`,
    /// the candidate column is excluded, reproducing the no-new-module path.
    std::pair<Mat<Real>, Mat<Real>> forward_trial(const Batch<Real>& batch, const Trial& tr,
                                                  bool masked) const {
        return forward_cfg(batch, tr.structure, tr.span + 1, tr.span,
                           masked ? nullptr : &tr.candidate, tr.head_w, tr.head_b, tr.n_out,
                           nullptr);
    }

    double trial_accuracy(const Batch<Real>& batch, const Trial& tr, bool masked) const {
        if (batch.n == 0) return 0.0;
        auto [logits, feats] = forward_trial(batch, tr, masked);
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

    /// One trial step: full pass trains structure, head, and candidate;
    /// masked pass trains structure and head on the no-candidate path.
    double trial_step(const Batch<Real>& batch, Trial& tr, bool masked, double lr) {
        StepGrads g;
        double loss = backward_cfg(batch, tr.structure, tr.span + 1, tr.span,
                                   masked ? nullptr : &tr.candidate, tr.head_w, tr.head_b,
                                   tr.n_out, std::nullopt, g);
        if (!std::isfinite(loss)) throw DivergenceError("non-finite trial loss");
        if (lr != 0.0) {
            size_t cols = tr.span + 1;
            for (size_t d = 0; d < depth_; ++d) {
                for (size_t m = 0; m < cols; ++m) {
                    if (masked && m == tr.span) continue;
                    tr.structure[d * cols + m] -= static_cast<Real>(lr) * g.structure[d * cols + m];
                }
            }
            for (size_t i = 0; i < tr.head_w.size(); ++i)
                tr.head_w[i] -= static_cast<Real>(lr) * g.head_w[i];
            for (size_t i = 0; i < tr.head_b.size(); ++i)
                tr.head_b[i] -= static_cast<Real>(lr) * g.head_b[i];
            if (!masked) {
                for (size_t i = 0; i < tr.candidate.w.size(); ++i)
                    tr.candidate.w[i] -= static_cast<Real>(lr) * g.candidate_w[i];
                for (size_t i = 0; i < tr.candidate.b.size(); ++i)
                    tr.candidate.b[i] -= static_cast<Real>(lr) * g.candidate_b[i];
            }
        }
        return loss;
    }

    /// Commits a trial that keeps its candidate: the candidate joins the
    /// library (fresh local id) and the task adopts the trial's structure and
    /// head. Returns the new module's id.
    ModuleId commit_trial_keep(int task, const Trial& tr) {
        TaskState& ts = state(task);
        ModuleId id = add_module(tr.candidate, static_cast<uint16_t>(task), true);
        size_t cols = tr.span + 1;
        ts.span = library_.size();
        ts.structure.assign(depth_ * ts.span, kNewColumnInit);
        for (size_t d = 0; d < depth_; ++d) {
            for (size_t m = 0; m < tr.span; ++m)
                ts.structure[d * ts.span + m] = tr.structure[d * cols + m];
            ts.structure[d * ts.span + (library_.size() - 1)] = tr.structure[d * cols + tr.span];
        }
        ts.head_w = tr.head_w;
        ts.head_b = tr.head_b;
        return id;
    }

    /// Commits a trial without its candidate (the masked configuration).
    void commit_trial_reject(int task, const Trial& tr) {
        TaskState& ts = state(task);
        size_t cols = tr.span + 1;
        ts.structure.assign(depth_ * ts.span, Real(0));
        for (size_t d = 0; d < depth_; ++d)
            for (size_t m = 0; m < tr.span; ++m)
                ts.structure[d * ts.span + m] = tr.structure[d * cols + m];
        ts.head_w = tr.head_w;
        ts.head_b = tr.head_b;
    }

    /// Structure-only SGD step (used when fine-tuning past tasks on replay
    /// after the library grows).
    double structure_step(const Batch<Real>& batch, int task, double lr) {
        TaskState& ts = state(task);
        StepGrads g;
        double loss = backward_cfg(batch, ts.structure, ts.span, ts.span, nullptr, ts.head_w,
                                   ts.head_b, ts.n_out, std::nullopt, g);
        if (!std::isfinite(loss)) throw DivergenceError("non-finite training loss");
        if (lr != 0.0)
            for (size_t i = 0; i < ts.structure.size(); ++i)
                ts.structure[i] -= static_cast<Real>(lr) * g.structure[i];
        return loss;
    }

    /// Per-depth softmax over a task's structure weights.
    std::vector<Real> structure_softmax(int task, size_t depth_idx) const {
        const TaskState& ts = state(task);
        std::vector<Real> p(ts.span);
        softmax_row(ts.structure.data() + depth_idx * ts.span, p.data(), ts.span);
        return p;
    }

    FeatShape module_input_shape() const {
        if (kind_ == LayerKind::dense) return input_shape_;
        return detail::conv_out_shape<Real>(encoder_->ch, input_shape_.h, input_shape_.w,
                                            encoder_->k);
    }

private:
    struct Caches {
        std::vector<Mat<Real>> acts;                       // per depth boundary
        std::vector<std::vector<Mat<Real>>> module_outs;   // [depth][module]
        std::vector<std::vector<std::vector<size_t>>> argmax; // conv pooling winners
        std::vector<std::vector<Real>> probs;              // softmax per depth
        std::vector<FeatShape> shapes;                     // shape at each boundary
    };

    struct StepGrads {
        bool all_modules = false;
        std::vector<Real> structure;
        std::vector<Real> head_w, head_b;
        std::vector<Real> candidate_w, candidate_b;
        std::vector<std::vector<Real>> module_w, module_b; // when train_module or all_modules
    };

    struct FisherAccum {
        std::vector<double> enc_w, enc_b;
        std::vector<std::vector<double>> mod_w, mod_b;
        std::vector<double> structure, head_w, head_b;
    };

    const TaskState& state(int task) const {
        auto it = tasks_.find(task);
        if (it == tasks_.end())
            throw std::out_of_range("no structure weights for task " + std::to_string(task));
        return it->second;
    }
    TaskState& state(int task) {
        auto it = tasks_.find(task);
        if (it == tasks_.end())
            throw std::out_of_range("no structure weights for task " + std::to_string(task));
        return it->second;
    }

    void check_module_shape(const Module<Real>& m) const {
        const Module<Real>& ref = library_.front();
        bool ok = m.kind == ref.kind && m.w.size() == ref.w.size() && m.b.size() == ref.b.size();
        if (!ok) throw std::invalid_argument("module shape incompatible with this library");
    }

    FeatShape shape_after_module(const FeatShape& s) const {
        if (kind_ == LayerKind::dense) return s;
        return detail::conv_out_shape<Real>(s.ch, s.h, s.w, library_.front().k);
    }

    Mat<Real> encode(const Batch<Real>& batch, Caches* c) const {
        if (batch.dim != input_shape_.total())
            throw std::invalid_argument("input dimension mismatch");
        if (!encoder_) {
            Mat<Real> a(batch.n, batch.dim);
            std::copy(batch.x.begin(), batch.x.end(), a.v.begin());
            if (c) c->shapes.push_back(input_shape_);
            return a;
        }
        FeatShape os = module_input_shape();
        Mat<Real> a(batch.n, os.total());
        std::vector<size_t> argmax;
        for (size_t r = 0; r < batch.n; ++r) {
            // encoder is in_ch -> ch; reuse the conv module kernel with a
            // temporary module whose input channel count differs
            encoder_forward(batch.row(r), a.row(r), argmax);
        }
        if (c) c->shapes.push_back(os);
        return a;
    }

    void encoder_forward(const Real* in, Real* out, std::vector<size_t>& argmax) const {
        const Module<Real>& e = *encoder_;
        size_t k = e.k;
        size_t cH = input_shape_.h - k + 1, cW = input_shape_.w - k + 1;
        FeatShape os = module_input_shape();
        argmax.assign(os.total(), 0);
        std::vector<double> conv(cH * cW);
        for (size_t oc = 0; oc < e.ch; ++oc) {
            for (size_t yy = 0; yy < cH; ++yy)
                for (size_t xx = 0; xx < cW; ++xx) {
                    double s = static_cast<double>(e.b[oc]);
                    for (size_t ic = 0; ic < encoder_in_ch_; ++ic) {
                        const Real* plane = in + ic * input_shape_.h * input_shape_.w;
                        const Real* wb = e.w.data() + (oc * encoder_in_ch_ + ic) * k * k;
                        for (size_t ky = 0; ky < k; ++ky)
                            for (size_t kx = 0; kx < k; ++kx)
                                s += static_cast<double>(wb[ky * k + kx]) *
                                     static_cast<double>(plane[(yy + ky) * input_shape_.w + (xx + kx)]);
                    }
                    conv[yy * cW + xx] = s > 0 ? s : 0.0;
                }
            for (size_t py = 0; py < os.h; ++py)
                for (size_t px = 0; px < os.w; ++px) {
                    size_t best = (2 * py) * cW + (2 * px);
                    double bv = conv[best];
                    for (size_t dy = 0; dy < 2; ++dy)
                        for (size_t dx = 0; dx < 2; ++dx) {
                            size_t yy = 2 * py + dy, xx = 2 * px + dx;
                            if (yy >= cH || xx >= cW) continue;
                            if (conv[yy * cW + xx] > bv) {
                                bv = conv[yy * cW + xx];
                                best = yy * cW + xx;
                            }
                        }
                    out[oc * os.h * os.w + py * os.w + px] = static_cast<Real>(bv);
                }
        }
    }

    // Runs encoder plus all module layers under a given structure config.
    // Structure rows live at the given stride; `candidate`, when present,
    // occupies the extra column at index `span` (so cols == span + 1).
    void run_trunk(const Batch<Real>& batch, const std::vector<Real>& structure, size_t stride,
                   size_t span, const Module<Real>* candidate, Caches& c) const {
        size_t cols = span + (candidate ? 1 : 0);
        if (structure.size() < depth_ * stride || stride < cols)
            throw std::invalid_argument("structure size mismatch");
        c.acts.clear();
        c.module_outs.assign(depth_, {});
        c.argmax.assign(depth_, {});
        c.probs.assign(depth_, {});
        c.shapes.clear();
        Mat<Real> a = encode(batch, &c);
        c.acts.push_back(a);
        FeatShape shape = c.shapes.back();
        for (size_t d = 0; d < depth_; ++d) {
            std::vector<Real> p(cols);
            softmax_row(structure.data() + d * stride, p.data(), cols);
            c.probs[d] = p;
            FeatShape os = kind_ == LayerKind::dense
                               ? shape
                               : detail::conv_out_shape<Real>(shape.ch, shape.h, shape.w,
                                                              library_.front().k);
            Mat<Real> next(batch.n, os.total());
            c.module_outs[d].resize(cols);
            c.argmax[d].resize(cols);
            for (size_t m = 0; m < cols; ++m) {
                const Module<Real>& mod = m < span ? library_[m] : *candidate;
                Mat<Real> mo(batch.n, os.total());
                if (kind_ == LayerKind::dense) {
                    for (size_t r = 0; r < batch.n; ++r)
                        detail::module_dense_forward(mod, c.acts.back().row(r), mo.row(r));
                } else {
                    c.argmax[d][m].resize(batch.n * os.total());
                    std::vector<size_t> am;
                    for (size_t r = 0; r < batch.n; ++r) {
                        detail::module_conv_forward(mod, c.acts.back().row(r), shape, mo.row(r), am);
                        std::copy(am.begin(), am.end(),
                                  c.argmax[d][m].begin() + r * os.total());
                    }
                }
                double pm = static_cast<double>(p[m]);
                for (size_t i = 0; i < mo.v.size(); ++i)
                    next.v[i] += static_cast<Real>(pm * static_cast<double>(mo.v[i]));
                c.module_outs[d][m] = std::move(mo);
            }
            c.acts.push_back(std::move(next));
            c.shapes.push_back(os);
            shape = os;
        }
    }

    std::pair<Mat<Real>, Mat<Real>> forward_cfg(const Batch<Real>& batch,
                                                const std::vector<Real>& structure, size_t stride,
                                                size_t span, const Module<Real>* candidate,
                                                const std::vector<Real>& head_w,
                                                const std::vector<Real>& head_b, size_t n_out,
                                                Caches* cache) const {
        Caches local;
        Caches& c = cache ? *cache : local;
        run_trunk(batch, structure, stride, span, candidate, c);
        const Mat<Real>& f = c.acts.back();
        size_t feat = f.cols;
        Mat<Real> logits(batch.n, n_out);
        for (size_t r = 0; r < batch.n; ++r) {
            const Real* fr = f.row(r);
            for (size_t o = 0; o < n_out; ++o) {
                double s = static_cast<double>(head_b[o]);
                const Real* wr = head_w.data() + o * feat;
                for (size_t i = 0; i < feat; ++i)
                    s += static_cast<double>(wr[i]) * static_cast<double>(fr[i]);
                logits.at(r, o) = static_cast<Real>(s);
            }
        }
        return {std::move(logits), c.acts.back()};
    }

    // Backward under a structure config. Gradients for: structure row(s),
    // head, candidate (when present), one designated library module
    // (train_module), and optionally every module (for Fisher estimation).
    double backward_cfg(const Batch<Real>& batch, const std::vector<Real>& structure,
                        size_t stride, size_t span, const Module<Real>* candidate,
                        const std::vector<Real>& head_w, const std::vector<Real>& head_b,
                        size_t n_out, std::optional<size_t> train_module, StepGrads& g) const {
        Caches c;
        auto [logits, feats] = forward_cfg(batch, structure, stride, span, candidate, head_w,
                                           head_b, n_out, &c);
        size_t cols = span + (candidate ? 1 : 0);
        size_t feat = feats.cols;

        g.structure.assign(depth_ * stride, Real(0));
        g.head_w.assign(head_w.size(), Real(0));
        g.head_b.assign(head_b.size(), Real(0));
        if (candidate) {
            g.candidate_w.assign(candidate->w.size(), Real(0));
            g.candidate_b.assign(candidate->b.size(), Real(0));
        }
        bool want_all = g.all_modules;
        if (want_all || train_module) {
            g.module_w.assign(library_.size(), {});
            g.module_b.assign(library_.size(), {});
            for (size_t m = 0; m < library_.size(); ++m) {
                if (want_all || (train_module && *train_module == m)) {
                    g.module_w[m].assign(library_[m].w.size(), Real(0));
                    g.module_b[m].assign(library_[m].b.size(), Real(0));
                }
            }
        }

        size_t counted = 0;
        for (size_t i = 0; i < batch.n; ++i)
            if (batch.y[i] >= 0) ++counted;
        if (counted == 0) return 0.0;
        double inv_n = 1.0 / static_cast<double>(counted);
        double loss = detail::cross_entropy(logits, batch.y, nullptr);

        Mat<Real> da(batch.n, feat);
        std::vector<Real> probs(n_out);
        for (size_t i = 0; i < batch.n; ++i) {
            if (batch.y[i] < 0) continue;
            softmax_row(logits.row(i), probs.data(), n_out);
            const Real* fr = feats.row(i);
            for (size_t o = 0; o < n_out; ++o) {
                double gg = static_cast<double>(probs[o]);
                if (static_cast<int>(o) == batch.y[i]) gg -= 1.0;
                gg *= inv_n;
                if (gg == 0.0) continue;
                g.head_b[o] += static_cast<Real>(gg);
                Real* wgr = g.head_w.data() + o * feat;
                const Real* wr = head_w.data() + o * feat;
                for (size_t ci = 0; ci < feat; ++ci) {
                    wgr[ci] += static_cast<Real>(gg * static_cast<double>(fr[ci]));
                    da.at(i, ci) += static_cast<Real>(gg * static_cast<double>(wr[ci]));
                }
            }
        }

        for (size_t d = depth_; d-- > 0;) {
            const Mat<Real>& in = c.acts[d];
            const FeatShape in_shape = c.shapes[d];
            Mat<Real> din(in.rows, in.cols);
            const std::vector<Real>& p = c.probs[d];
            // structure gradient via softmax jacobian
            std::vector<double> dp(cols, 0.0);
            for (size_t m = 0; m < cols; ++m) {
                const Mat<Real>& mo = c.module_outs[d][m];
                double dot = 0.0;
                for (size_t i = 0; i < mo.v.size(); ++i)
                    dot += static_cast<double>(da.v[i]) * static_cast<double>(mo.v[i]);
                dp[m] = dot;
            }
            double mean = 0.0;
            for (size_t m = 0; m < cols; ++m) mean += static_cast<double>(p[m]) * dp[m];
            for (size_t m = 0; m < cols; ++m)
                g.structure[d * stride + m] =
                    static_cast<Real>(static_cast<double>(p[m]) * (dp[m] - mean));

            // module paths
            std::vector<Real> dmo(c.module_outs[d][0].v.size());
            for (size_t m = 0; m < cols; ++m) {
                double pm = static_cast<double>(p[m]);
                if (pm == 0.0) continue;
                const Mat<Real>& mo = c.module_outs[d][m];
                for (size_t i = 0; i < mo.v.size(); ++i)
                    dmo[i] = static_cast<Real>(pm * static_cast<double>(da.v[i]));
                bool is_candidate = candidate && m == span;
                Real* wg = nullptr;
                Real* bg = nullptr;
                if (is_candidate) {
                    wg = g.candidate_w.data();
                    bg = g.candidate_b.data();
                } else if (!g.module_w.empty() && !g.module_w[m].empty()) {
                    wg = g.module_w[m].data();
                    bg = g.module_b[m].data();
                }
                const Module<Real>& mod = is_candidate ? *candidate : library_[m];
                size_t ot = mo.cols;
                for (size_t r = 0; r < batch.n; ++r) {
                    if (kind_ == LayerKind::dense) {
                        detail::module_dense_backward(mod, in.row(r), mo.row(r), dmo.data() + r * ot,
                                                      din.row(r), wg, bg);
                    } else {
                        std::vector<size_t> am(c.argmax[d][m].begin() + r * ot,
                                               c.argmax[d][m].begin() + (r + 1) * ot);
                        detail::module_conv_backward(mod, in.row(r), in_shape, mo.row(r),
                                                     dmo.data() + r * ot, am, din.row(r), wg, bg);
                    }
                }
            }
            da = std::move(din);
        }
        // encoder stays frozen; gradient stops here
        return loss;
    }

    void apply_grads(TaskState& ts, const StepGrads& g, double lr,
                     std::optional<size_t> train_module) {
        for (size_t i = 0; i < ts.structure.size(); ++i)
            ts.structure[i] -= static_cast<Real>(lr) * g.structure[i];
        for (size_t i = 0; i < ts.head_w.size(); ++i)
            ts.head_w[i] -= static_cast<Real>(lr) * g.head_w[i];
        for (size_t i = 0; i < ts.head_b.size(); ++i)
            ts.head_b[i] -= static_cast<Real>(lr) * g.head_b[i];
        if (train_module && !g.module_w.empty() && !g.module_w[*train_module].empty()) {
            Module<Real>& m = library_[*train_module];
            for (size_t i = 0; i < m.w.size(); ++i)
                m.w[i] -= static_cast<Real>(lr) * g.module_w[*train_module][i];
            for (size_t i = 0; i < m.b.size(); ++i)
                m.b[i] -= static_cast<Real>(lr) * g.module_b[*train_module][i];
        }
    }

    void apply_fed_penalty_grads(int task, const std::vector<Real>& pgrad, double lr) {
        TaskState& ts = state(task);
        size_t off = 0;
        for (size_t m = 0; m < n_basis_; ++m) {
            Module<Real>& mod = library_[m];
            for (size_t i = 0; i < mod.w.size(); ++i)
                mod.w[i] -= static_cast<Real>(lr) * pgrad[off + i];
            off += mod.w.size();
            for (size_t i = 0; i < mod.b.size(); ++i)
                mod.b[i] -= static_cast<Real>(lr) * pgrad[off + i];
            off += mod.b.size();
        }
        for (size_t d = 0; d < depth_; ++d)
            for (size_t m = 0; m < n_basis_; ++m)
                ts.structure[d * ts.span + m] -= static_cast<Real>(lr) * pgrad[off++];
    }

    FisherAccum make_fisher_accum() const {
        FisherAccum a;
        if (encoder_) {
            a.enc_w.assign(encoder_->w.size(), 0.0);
            a.enc_b.assign(encoder_->b.size(), 0.0);
        }
        a.mod_w.resize(library_.size());
        a.mod_b.resize(library_.size());
        for (size_t m = 0; m < library_.size(); ++m) {
            a.mod_w[m].assign(library_[m].w.size(), 0.0);
            a.mod_b[m].assign(library_[m].b.size(), 0.0);
        }
        return a;
    }

    void accumulate_fisher(FisherAccum& a, const StepGrads& g, int task) {
        const TaskState& ts = state(task);
        if (a.structure.empty()) {
            a.structure.assign(ts.structure.size(), 0.0);
            a.head_w.assign(ts.head_w.size(), 0.0);
            a.head_b.assign(ts.head_b.size(), 0.0);
        }
        for (size_t m = 0; m < library_.size(); ++m) {
            for (size_t i = 0; i < g.module_w[m].size(); ++i) {
                double v = static_cast<double>(g.module_w[m][i]);
                a.mod_w[m][i] += v * v;
            }
            for (size_t i = 0; i < g.module_b[m].size(); ++i) {
                double v = static_cast<double>(g.module_b[m][i]);
                a.mod_b[m][i] += v * v;
            }
        }
        for (size_t i = 0; i < g.structure.size(); ++i) {
            double v = static_cast<double>(g.structure[i]);
            a.structure[i] += v * v;
        }
        for (size_t i = 0; i < g.head_w.size(); ++i) {
            double v = static_cast<double>(g.head_w[i]);
            a.head_w[i] += v * v;
        }
        for (size_t i = 0; i < g.head_b.size(); ++i) {
            double v = static_cast<double>(g.head_b[i]);
            a.head_b[i] += v * v;
        }
    }

    FisherDiag finish_fisher(const FisherAccum& a, size_t n, int task) const {
        ParamVector pv = flatten();
        FisherDiag fd;
        fd.layout = pv.layout;
        fd.values.assign(pv.values.size(), 0.0f);
        double inv = 1.0 / static_cast<double>(n);
        auto fill = [&fd](const std::string& name, const std::vector<double>& src, double inv_) {
            for (const auto& e : fd.layout) {
                if (e.name == name) {
                    for (size_t i = 0; i < src.size(); ++i)
                        fd.values[e.offset + i] = static_cast<float>(src[i] * inv_);
                    return;
                }
            }
        };
        if (encoder_) {
            fill("encoder.w", a.enc_w, inv);
            fill("encoder.b", a.enc_b, inv);
        }
        for (size_t m = 0; m < library_.size(); ++m) {
            fill("module" + std::to_string(m) + ".w", a.mod_w[m], inv);
            fill("module" + std::to_string(m) + ".b", a.mod_b[m], inv);
        }
        fill("structure" + std::to_string(task), a.structure, inv);
        fill("head" + std::to_string(task) + ".w", a.head_w, inv);
        fill("head" + std::to_string(task) + ".b", a.head_b, inv);
        return fd;
    }

    uint16_t owner_ = 0;
    LayerKind kind_ = LayerKind::dense;
    FeatShape input_shape_;
    size_t depth_ = 1;
    size_t n_basis_ = 0;
    uint32_t next_serial_ = 0;
    size_t encoder_in_ch_ = 0;
    std::optional<Module<Real>> encoder_; // frozen, image family only
    std::vector<Module<Real>> library_;
    std::map<int, TaskState> tasks_;
};

/// Outcome of a component-dropout round.
struct DropoutDecision {
    bool keep = false;
    std::optional<ModuleId> chosen;   // id of the winning candidate as offered
    size_t chosen_index = 0;          // index into the candidate list
    double best_with = 0.0;           // winner validation accuracy, candidate active
    double best_without = 0.0;        // same trial, candidate path zeroed
    std::optional<ModuleId> added;    // library id when keep == true
};

/// Round-robin candidate evaluation. A fresh random module is appended as the
/// last candidate. Minibatches rotate over per-candidate trials; every batch
/// gets a full pass plus a dropout pass with the candidate path zeroed. The
/// winner is kept only when its validation accuracy beats its own no-candidate
/// configuration by at least `keep_threshold` accuracy points.
template <class Real>
inline DropoutDecision component_dropout_train(ModularNet<Real>& net, int task,
                                               const Batch<Real>& train, const Batch<Real>& val,
                                               std::vector<Module<Real>> candidates,
                                               size_t epochs, double lr, size_t batch_size,
                                               double keep_threshold, Rng& rng) {
    candidates.push_back(net.family() == LayerKind::dense
                             ? Module<Real>::dense_random(net.module_input_shape().total(), rng)
                             : Module<Real>::conv_random(net.module_input_shape().ch,
                                                         net.library().front().k, rng));
    std::vector<typename ModularNet<Real>::Trial> trials;
    trials.reserve(candidates.size());
    for (const auto& c : candidates) trials.push_back(net.make_trial(task, c));

    std::vector<size_t> order(train.n);
    for (size_t i = 0; i < train.n; ++i) order[i] = i;
    size_t global_batch = 0;
    for (size_t e = 0; e < epochs; ++e) {
        rng.shuffle(order);
        for (size_t start = 0; start < train.n; start += batch_size) {
            size_t bn = std::min(batch_size, train.n - start);
            Batch<Real> b = Batch<Real>::zeros(bn, train.dim);
            for (size_t i = 0; i < bn; ++i) {
                std::copy(train.row(order[start + i]), train.row(order[start + i]) + train.dim,
                          b.row(i));
                b.y[i] = train.y[order[start + i]];
            }
            auto& tr = trials[global_batch % trials.size()];
            net.trial_step(b, tr, false, lr);
            net.trial_step(b, tr, true, lr);
            ++global_batch;
        }
    }

    DropoutDecision dec;
    size_t best = 0;
    double best_acc = -1.0;
    for (size_t t = 0; t < trials.size(); ++t) {
        double acc = net.trial_accuracy(val, trials[t], false);
        if (acc > best_acc) {
            best_acc = acc;
            best = t;
        }
    }
    dec.chosen_index = best;
    dec.chosen = candidates[best].id;
    dec.best_with = best_acc;
    dec.best_without = net.trial_accuracy(val, trials[best], true);

    // single-class tasks never add capacity
    bool degenerate = true;
    int first = -2;
    for (int yv : train.y) {
        if (yv < 0) continue;
        if (first == -2) first = yv;
        else if (yv != first) { degenerate = false; break; }
    }

    dec.keep = !degenerate && (dec.best_with - dec.best_without >= keep_threshold);
    if (dec.keep) {
        dec.added = net.commit_trial_keep(task, trials[best]);
    } else {
        net.commit_trial_reject(task, trials[best]);
    }
    return dec;
}

} // namespace dcl
