#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcl/common.hpp"
#include "dcl/nn.hpp"

namespace dcl {

enum class Provenance { local, received };

/// One labeled example. `label` is a collective-wide class id; nets address
/// classes through the position of the label inside a task's label set.
struct Instance {
    std::vector<float> x;
    int label = -1;
    Provenance prov = Provenance::local;
};

/// Pixel/feature geometry used by the communication cost model.
struct InstanceShape {
    int h = 0, w = 1, c = 1;
    double floats() const { return static_cast<double>(h) * w * c; }
};

struct TaskSpec {
    int index = 0;                 // position in the owning agent's stream
    int family = 0;                // source family id
    std::vector<int> labels;       // sorted global class ids
    std::vector<Instance> train;
    std::vector<Instance> val;
    std::vector<Instance> test;
    InstanceShape shape;

    int label_index(int global_label) const {
        auto it = std::lower_bound(labels.begin(), labels.end(), global_label);
        if (it == labels.end() || *it != global_label) return -1;
        return static_cast<int>(it - labels.begin());
    }
};

struct TaskStream {
    std::vector<std::vector<TaskSpec>> per_agent;
    std::vector<int> group; // combined setting: family per agent (tasks 5+)

    size_t n_agents() const { return per_agent.size(); }
};

/// Builds a Batch from instances, mapping global labels to head indices of
/// `task`. Unknown labels map to -1 and are skipped by losses.
template <class Real>
inline Batch<Real> make_batch(const std::vector<const Instance*>& items, const TaskSpec& task) {
    if (items.empty()) return Batch<Real>::zeros(0, task.shape.h * task.shape.w * task.shape.c);
    Batch<Real> b = Batch<Real>::zeros(items.size(), items[0]->x.size());
    for (size_t i = 0; i < items.size(); ++i) {
        for (size_t d = 0; d < items[i]->x.size(); ++d)
            b.x[i * b.dim + d] = static_cast<Real>(items[i]->x[d]);
        b.y[i] = task.label_index(items[i]->label);
    }
    return b;
}

template <class Real>
inline Batch<Real> make_batch(const std::vector<Instance>& items, const TaskSpec& task) {
    std::vector<const Instance*> ptrs;
    ptrs.reserve(items.size());
    for (const auto& it : items) ptrs.push_back(&it);
    return make_batch<Real>(ptrs, task);
}

/// Per-task reservoir of stored pairs. Insertion keeps a uniform subsample of
/// everything offered; sampling is uniform over the stored contents.
class ReplayBuffer {
public:
    explicit ReplayBuffer(size_t capacity_per_task = 64) : capacity_(capacity_per_task) {}

    size_t capacity() const { return capacity_; }
    size_t size(int task) const {
        auto it = slots_.find(task);
        return it == slots_.end() ? 0 : it->second.items.size();
    }
    size_t total_size() const {
        size_t s = 0;
        for (const auto& [t, slot] : slots_) s += slot.items.size();
        return s;
    }
    std::vector<int> tasks() const {
        std::vector<int> out;
        for (const auto& [t, slot] : slots_) out.push_back(t);
        return out;
    }
    const std::vector<Instance>& items(int task) const {
        static const std::vector<Instance> empty;
        auto it = slots_.find(task);
        return it == slots_.end() ? empty : it->second.items;
    }

    void insert(int task, Instance inst, Rng& rng) {
        Slot& slot = slots_[task];
        slot.seen += 1;
        if (slot.items.size() < capacity_) {
            slot.items.push_back(std::move(inst));
            return;
        }
        size_t j = rng.uniform_index(slot.seen);
        if (j < capacity_) slot.items[j] = std::move(inst);
    }

    /// n uniform draws (with replacement) over one task or over everything.
    std::vector<const Instance*> sample(size_t n, Rng& rng, std::optional<int> task = {}) const {
        if (n == 0) throw std::invalid_argument("sample size must be positive");
        std::vector<const Instance*> pool;
        if (task) {
            auto it = slots_.find(*task);
            if (it != slots_.end())
                for (const auto& inst : it->second.items) pool.push_back(&inst);
        } else {
            for (const auto& [t, slot] : slots_)
                for (const auto& inst : slot.items) pool.push_back(&inst);
        }
        if (pool.empty()) throw std::out_of_range("sampling from empty replay buffer");
        std::vector<const Instance*> out(n);
        for (size_t i = 0; i < n; ++i) out[i] = pool[rng.uniform_index(pool.size())];
        return out;
    }

    /// min(n, stored) distinct items, for replay training batches.
    std::vector<const Instance*> sample_distinct(size_t n, int task, Rng& rng) const {
        auto it = slots_.find(task);
        if (it == slots_.end() || it->second.items.empty()) return {};
        const auto& items = it->second.items;
        auto idx = rng.sample_without_replacement(items.size(), std::min(n, items.size()));
        std::vector<const Instance*> out;
        out.reserve(idx.size());
        for (size_t i : idx) out.push_back(&items[i]);
        return out;
    }

private:
    struct Slot {
        std::vector<Instance> items;
        size_t seen = 0;
    };
    size_t capacity_;
    std::map<int, Slot> slots_;
};

struct SyntheticOptions {
    size_t pool_classes = 12;      // size of the shared class-prototype pool
    double proto_scale = 1.0;      // prototype spread around the family center
    double noise = 1.5;            // within-class standard deviation
    size_t train_per_class = 30;   // includes the validation share
    size_t test_per_class = 40;
    double val_frac = 0.2;
    int family = 0;
    double family_offset_scale = 0.0; // displaces the whole family in input space
};

namespace detail {

inline std::vector<std::vector<float>> make_prototype_pool(uint64_t seed, const SyntheticOptions& o,
                                                           size_t dim) {
    Rng rng = Rng::derive(seed, "prototypes", static_cast<uint64_t>(o.family));
    std::vector<float> offset(dim, 0.0f);
    if (o.family_offset_scale != 0.0) {
        Rng orng = Rng::derive(seed, "family-offset", static_cast<uint64_t>(o.family));
        for (size_t d = 0; d < dim; ++d)
            offset[d] = static_cast<float>(o.family_offset_scale * orng.normal());
    }
    std::vector<std::vector<float>> pool(o.pool_classes, std::vector<float>(dim));
    for (size_t c = 0; c < o.pool_classes; ++c)
        for (size_t d = 0; d < dim; ++d)
            pool[c][d] = static_cast<float>(o.proto_scale * rng.normal()) + offset[d];
    return pool;
}

inline TaskSpec make_gaussian_task(uint64_t seed, size_t agent, size_t t, size_t dim,
                                   size_t classes_per_task, const SyntheticOptions& o,
                                   const std::vector<std::vector<float>>& pool, int label_base) {
    Rng pick = Rng::derive(seed, "classes", (static_cast<uint64_t>(o.family) << 32) | agent, t);
    auto chosen = pick.sample_without_replacement(pool.size(), classes_per_task);
    TaskSpec task;
    task.index = static_cast<int>(t);
    task.family = o.family;
    task.shape = InstanceShape{static_cast<int>(dim), 1, 1};
    for (size_t c : chosen) task.labels.push_back(label_base + static_cast<int>(c));
    std::sort(task.labels.begin(), task.labels.end());

    Rng data = Rng::derive(seed, "samples", (static_cast<uint64_t>(o.family) << 32) | agent, t);
    size_t n_val = std::max<size_t>(1, static_cast<size_t>(o.val_frac * static_cast<double>(o.train_per_class) + 0.5));
    if (n_val >= o.train_per_class) n_val = o.train_per_class > 1 ? o.train_per_class - 1 : 0;
    auto draw = [&](size_t cls_pos, std::vector<Instance>& dst, size_t count) {
        const auto& proto = pool[chosen[cls_pos]];
        for (size_t i = 0; i < count; ++i) {
            Instance inst;
            inst.label = label_base + static_cast<int>(chosen[cls_pos]);
            inst.x.resize(dim);
            for (size_t d = 0; d < dim; ++d)
                inst.x[d] = proto[d] + static_cast<float>(o.noise * data.normal());
            dst.push_back(std::move(inst));
        }
    };
    for (size_t c = 0; c < chosen.size(); ++c) {
        draw(c, task.train, o.train_per_class - n_val);
        draw(c, task.val, n_val);
        draw(c, task.test, o.test_per_class);
    }
    return task;
}

} // namespace detail

/// Gaussian-cluster task stream. Tasks pick their classes from one shared
/// prototype pool, so label sets overlap across agents and knowledge gained
/// by one agent is relevant to others.
inline TaskStream gen_synthetic_stream(size_t n_agents, size_t tasks_per_agent,
                                       size_t classes_per_task, size_t dim, uint64_t seed,
                                       SyntheticOptions opts = {}) {
    if (classes_per_task < 2) throw std::invalid_argument("need at least 2 classes per task");
    if (dim < classes_per_task)
        throw std::invalid_argument("input dimension too small to separate class prototypes");
    if (opts.pool_classes < classes_per_task)
        throw std::invalid_argument("prototype pool smaller than classes per task");
    auto pool = detail::make_prototype_pool(seed, opts, dim);
    TaskStream stream;
    stream.per_agent.resize(n_agents);
    for (size_t a = 0; a < n_agents; ++a) {
        for (size_t t = 0; t < tasks_per_agent; ++t) {
            stream.per_agent[a].push_back(detail::make_gaussian_task(
                seed, a, t, dim, classes_per_task, opts, pool,
                opts.family * static_cast<int>(opts.pool_classes)));
        }
    }
    return stream;
}

/// Heterogeneous setting: three synthetic families with disjoint label pools
/// and displaced input distributions. Every agent's first four tasks mix
/// families; afterwards agents split into three near-equal groups, each
/// drawing from a single family.
inline TaskStream gen_combined_stream(size_t n_agents, size_t tasks_per_agent,
                                      size_t classes_per_task, size_t dim, uint64_t seed,
                                      SyntheticOptions base = {}) {
    if (n_agents < 3) throw std::invalid_argument("combined stream needs at least 3 agents");
    if (base.family_offset_scale == 0.0) base.family_offset_scale = 3.0;
    std::vector<std::vector<std::vector<float>>> pools;
    std::vector<SyntheticOptions> fam_opts;
    for (int f = 0; f < 3; ++f) {
        SyntheticOptions o = base;
        o.family = f;
        fam_opts.push_back(o);
        pools.push_back(detail::make_prototype_pool(seed, o, dim));
    }
    TaskStream stream;
    stream.per_agent.resize(n_agents);
    stream.group.resize(n_agents);
    const size_t mixed = std::min<size_t>(4, tasks_per_agent);
    for (size_t a = 0; a < n_agents; ++a) {
        stream.group[a] = static_cast<int>(a % 3);
        for (size_t t = 0; t < tasks_per_agent; ++t) {
            int fam = t < mixed ? static_cast<int>((a + t) % 3) : stream.group[a];
            TaskSpec task = detail::make_gaussian_task(
                seed, a, t, dim, classes_per_task, fam_opts[fam], pools[fam],
                fam * static_cast<int>(base.pool_classes));
            stream.per_agent[a].push_back(std::move(task));
        }
    }
    return stream;
}

// ---------------------------------------------------------------------------
// IDX binary ingestion (big-endian headers, magic 0x803 images / 0x801 labels)

struct IdxData {
    std::vector<Instance> instances;
    size_t h = 0, w = 0;
};

namespace detail {

inline uint32_t read_u32_be(std::istream& in, const std::string& what) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw ConfigError("truncated IDX file while reading " + what);
    return (static_cast<uint32_t>(b[0]) << 24) | (static_cast<uint32_t>(b[1]) << 16) |
           (static_cast<uint32_t>(b[2]) << 8) | static_cast<uint32_t>(b[3]);
}

} // namespace detail

inline IdxData load_idx(const std::string& path_images, const std::string& path_labels) {
    std::ifstream fi(path_images, std::ios::binary);
    if (!fi) throw ConfigError("cannot open IDX image file " + path_images);
    std::ifstream fl(path_labels, std::ios::binary);
    if (!fl) throw ConfigError("cannot open IDX label file " + path_labels);

    uint32_t magic_i = detail::read_u32_be(fi, "image magic");
    if (magic_i != 0x00000803u)
        throw ConfigError("bad IDX image magic in " + path_images);
    uint32_t n_images = detail::read_u32_be(fi, "image count");
    uint32_t h = detail::read_u32_be(fi, "image height");
    uint32_t w = detail::read_u32_be(fi, "image width");

    uint32_t magic_l = detail::read_u32_be(fl, "label magic");
    if (magic_l != 0x00000801u)
        throw ConfigError("bad IDX label magic in " + path_labels);
    uint32_t n_labels = detail::read_u32_be(fl, "label count");
    if (n_images != n_labels)
        throw ConfigError("IDX image/label count mismatch: " + std::to_string(n_images) + " vs " +
                          std::to_string(n_labels));

    IdxData out;
    out.h = h;
    out.w = w;
    out.instances.resize(n_images);
    std::vector<unsigned char> px(h * w);
    for (uint32_t i = 0; i < n_images; ++i) {
        fi.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
        if (!fi) throw ConfigError("truncated IDX image file " + path_images);
        unsigned char lbl;
        fl.read(reinterpret_cast<char*>(&lbl), 1);
        if (!fl) throw ConfigError("truncated IDX label file " + path_labels);
        Instance& inst = out.instances[i];
        inst.label = lbl;
        inst.x.resize(px.size());
        for (size_t p = 0; p < px.size(); ++p)
            inst.x[p] = static_cast<float>(px[p]) / 255.0f;
    }
    return out;
}

/// Image-family synthetic tasks: each class is a random pattern, instances are
/// noisy copies. Stands in for pixel datasets when exercising conv models.
inline TaskStream gen_image_stream(size_t n_agents, size_t tasks_per_agent,
                                   size_t classes_per_task, size_t img_h, size_t img_w,
                                   uint64_t seed, SyntheticOptions opts = {}) {
    TaskStream stream = gen_synthetic_stream(n_agents, tasks_per_agent, classes_per_task,
                                             img_h * img_w, seed, opts);
    for (auto& agent_tasks : stream.per_agent) {
        for (auto& task : agent_tasks) {
            task.shape = InstanceShape{static_cast<int>(img_h), static_cast<int>(img_w), 1};
            auto clamp01 = [](std::vector<Instance>& split) {
                for (auto& inst : split)
                    for (auto& v : inst.x) v = std::min(1.0f, std::max(0.0f, 0.5f + 0.25f * v));
            };
            clamp01(task.train);
            clamp01(task.val);
            clamp01(task.test);
        }
    }
    return stream;
}

/// Task stream over a loaded IDX dataset: tasks draw class subsets and sample
/// disjoint instances per agent-task from the global pool.
inline TaskStream make_idx_stream(const IdxData& data, size_t n_agents, size_t tasks_per_agent,
                                  size_t classes_per_task, uint64_t seed,
                                  size_t train_per_class, size_t test_per_class,
                                  double val_frac = 0.2) {
    std::map<int, std::vector<size_t>> by_class;
    for (size_t i = 0; i < data.instances.size(); ++i)
        by_class[data.instances[i].label].push_back(i);
    std::vector<int> classes;
    for (const auto& [c, v] : by_class) classes.push_back(c);
    if (classes.size() < classes_per_task)
        throw ConfigError("IDX dataset has fewer classes than classes_per_task");

    TaskStream stream;
    stream.per_agent.resize(n_agents);
    size_t n_val = std::max<size_t>(1, static_cast<size_t>(val_frac * static_cast<double>(train_per_class) + 0.5));
    for (size_t a = 0; a < n_agents; ++a) {
        for (size_t t = 0; t < tasks_per_agent; ++t) {
            Rng pick = Rng::derive(seed, "idx-classes", a, t);
            auto chosen = pick.sample_without_replacement(classes.size(), classes_per_task);
            TaskSpec task;
            task.index = static_cast<int>(t);
            task.family = 0;
            task.shape = InstanceShape{static_cast<int>(data.h), static_cast<int>(data.w), 1};
            for (size_t ci : chosen) task.labels.push_back(classes[ci]);
            std::sort(task.labels.begin(), task.labels.end());
            Rng samp = Rng::derive(seed, "idx-samples", a, t);
            for (int lbl : task.labels) {
                const auto& pool = by_class[lbl];
                auto idx = samp.sample_without_replacement(pool.size(),
                                                           std::min(pool.size(), train_per_class + test_per_class));
                size_t n_train = std::min(idx.size(), train_per_class);
                for (size_t i = 0; i < idx.size(); ++i) {
                    const Instance& src = data.instances[pool[idx[i]]];
                    if (i < n_train - std::min(n_val, n_train ? n_train - 1 : 0))
                        task.train.push_back(src);
                    else if (i < n_train)
                        task.val.push_back(src);
                    else
                        task.test.push_back(src);
                }
            }
            stream.per_agent[a].push_back(std::move(task));
        }
    }
    return stream;
}

} // namespace dcl
