#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>
#include <vector>

#include "dcl/common.hpp"
#include "dcl/tasks.hpp"

namespace dcl {

/// Receiver-initiated request for instances similar to a hard example. The
/// raw input ships with the query so the answering side can embed it with its
/// own feature map.
struct Query {
    int requester = 0;
    std::vector<float> x;
    int origin_task = 0;
    size_t k = 1;
};

/// Class-level request: classes the receiver cares about, how much each is
/// worth to it, and the instance budget the sender may spend.
struct ClassRequest {
    int requester = 0;
    std::vector<int> classes;
    std::map<int, double> worth;
    double budget = 0.0;
};

struct QuerySelection {
    std::vector<size_t> indices; // positions into the scored pool, hardest first
    bool truncated = false;      // fewer instances available than requested
};

/// Picks the q highest-loss instances. Ties break toward the lower index, so
/// selection is deterministic for any loss pattern.
inline QuerySelection select_hardest(const std::vector<double>& losses, size_t q) {
    QuerySelection sel;
    std::vector<size_t> idx(losses.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
        if (losses[a] != losses[b]) return losses[a] > losses[b];
        return a < b;
    });
    if (q >= idx.size()) {
        sel.truncated = q > idx.size();
        sel.indices = std::move(idx);
    } else {
        sel.indices.assign(idx.begin(), idx.begin() + static_cast<long>(q));
    }
    return sel;
}

/// Cosine distance in [0, 2]; zero vectors are treated as maximally distant
/// from everything (similarity 0).
inline double cosine_distance(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("feature dimension mismatch");
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * static_cast<double>(b[i]);
        na += static_cast<double>(a[i]) * static_cast<double>(a[i]);
        nb += static_cast<double>(b[i]) * static_cast<double>(b[i]);
    }
    if (na == 0.0 || nb == 0.0) return 1.0;
    return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
}

/// Indices of the k nearest database rows by cosine distance, nearest first;
/// ties break toward the lower index.
inline std::vector<size_t> knn_cosine(const std::vector<std::vector<float>>& db_features,
                                      const std::vector<float>& query_feature, size_t k) {
    std::vector<std::pair<double, size_t>> scored;
    scored.reserve(db_features.size());
    for (size_t i = 0; i < db_features.size(); ++i)
        scored.emplace_back(cosine_distance(db_features[i], query_feature), i);
    std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first < b.first;
        return a.second < b.second;
    });
    std::vector<size_t> out;
    out.reserve(std::min(k, scored.size()));
    for (size_t i = 0; i < scored.size() && i < k; ++i) out.push_back(scored[i].second);
    return out;
}

/// Per-class worth: mean validation cross-entropy restricted to the class.
/// Classes absent from the validation pool get worth 0.
inline std::map<int, double> class_worths(const std::vector<double>& losses,
                                          const std::vector<int>& labels,
                                          const std::set<int>& classes) {
    if (losses.size() != labels.size()) throw std::invalid_argument("losses/labels length mismatch");
    std::map<int, double> sum;
    std::map<int, size_t> count;
    for (size_t i = 0; i < losses.size(); ++i) {
        sum[labels[i]] += losses[i];
        count[labels[i]] += 1;
    }
    std::map<int, double> out;
    for (int c : classes) {
        auto it = count.find(c);
        out[c] = it == count.end() ? 0.0 : sum[c] / static_cast<double>(it->second);
    }
    return out;
}

/// Sender-side allocation: N_c = floor(worth_c / sum(worths over the class
/// intersection) * b). Returns an empty map when the intersection is empty or
/// all worths vanish. The total never exceeds b.
inline std::map<int, long> simp_allocate(const std::map<int, double>& requested_worth,
                                         const std::set<int>& sender_classes, double budget) {
    if (budget < 0) throw std::invalid_argument("budget must be nonnegative");
    std::map<int, long> out;
    double total_worth = 0.0;
    for (const auto& [c, w] : requested_worth) {
        if (w < 0) throw std::invalid_argument("negative class worth");
        if (sender_classes.count(c)) total_worth += w;
    }
    if (total_worth == 0.0) return out;
    for (const auto& [c, w] : requested_worth) {
        if (!sender_classes.count(c)) continue;
        long n = static_cast<long>(std::floor(w / total_worth * budget));
        if (n > 0) out[c] = n;
    }
    return out;
}

} // namespace dcl
