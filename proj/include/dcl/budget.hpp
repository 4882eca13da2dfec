#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>
#include <utility>
#include <stdexcept>
#include <string>
#include <vector>

namespace dcl {

/// b = H * W * C * N floats for N image instances (labels are charged
/// separately, one float per instance).
inline double cost_of_instances(double h, double w, double c, double n) {
    if (h < 0 || w < 0 || c < 0 || n < 0)
        throw std::invalid_argument("instance cost factors must be nonnegative");
    return h * w * c * n;
}

/// Parameter count of a dense layer: |W| + |b|.
inline double cost_of_dense(size_t in, size_t out) {
    return static_cast<double>(in * out + out);
}

/// Parameter count of a convolution layer: (c_in * c_out) k^2 + c_out.
inline double cost_of_conv(size_t c_in, size_t c_out, size_t k) {
    return static_cast<double>(c_in * c_out * k * k + c_out);
}

/// b = k * M floats for k modules of M parameters each.
inline double cost_of_modules(double k, double m) {
    if (k < 0 || m < 0) throw std::invalid_argument("module cost factors must be nonnegative");
    return k * m;
}

/// Total budget over a training horizon: b floats per communication, one
/// communication every f epochs.
inline double total_budget(double f_epochs, double b_per_comm, double horizon_epochs) {
    if (f_epochs < 1) throw std::invalid_argument("frequency must be at least 1 epoch");
    return b_per_comm * std::floor(horizon_epochs / f_epochs);
}

/// Ordinary least-squares slope of relative gain against log(B).
inline double marginal_gain_fit(const std::vector<std::pair<double, double>>& log_b_gain) {
    if (log_b_gain.size() < 2)
        throw std::invalid_argument("marginal gain fit needs at least 2 points");
    double mx = 0, my = 0;
    for (const auto& [x, y] : log_b_gain) {
        mx += x;
        my += y;
    }
    mx /= static_cast<double>(log_b_gain.size());
    my /= static_cast<double>(log_b_gain.size());
    double sxx = 0, sxy = 0;
    for (const auto& [x, y] : log_b_gain) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if (sxx == 0.0)
        throw std::invalid_argument("marginal gain fit is degenerate: all budgets equal");
    return sxy / sxx;
}

/// Ratio of relative gain to total communication cost.
inline double value_of_budget(double relative_gain, double total_b) {
    if (total_b <= 0) throw std::invalid_argument("total budget must be positive");
    return relative_gain / total_b;
}

/// Append-only account of every payload moved between agents. `clock` is the
/// global task counter at charge time. Rows never mutate; per-edge and
/// per-mode totals are maintained incrementally.
class CostLedger {
public:
    struct Row {
        int clock = 0;
        int from = 0;
        int to = 0;
        std::string mode;
        double floats = 0.0;
    };

    void charge(int clock, int from, int to, const std::string& mode, double floats) {
        if (floats < 0) throw std::invalid_argument("cannot charge negative floats");
        rows_.push_back(Row{clock, from, to, mode, floats});
        edge_totals_[{from, to}] += floats;
        mode_totals_[mode] += floats;
        total_ += floats;
    }

    const std::vector<Row>& rows() const { return rows_; }
    double total() const { return total_; }

    double total_for_mode(const std::string& mode) const {
        auto it = mode_totals_.find(mode);
        return it == mode_totals_.end() ? 0.0 : it->second;
    }

    double total_for_edge(int from, int to) const {
        auto it = edge_totals_.find({from, to});
        return it == edge_totals_.end() ? 0.0 : it->second;
    }

    /// Incremental totals must equal a fresh sum over the rows.
    bool conserved() const {
        std::map<std::pair<int, int>, double> edges;
        double t = 0;
        for (const auto& r : rows_) {
            edges[{r.from, r.to}] += r.floats;
            t += r.floats;
        }
        if (std::abs(t - total_) > 1e-9 * std::max(1.0, std::abs(total_))) return false;
        if (edges.size() != edge_totals_.size()) return false;
        for (const auto& [k, v] : edges) {
            auto it = edge_totals_.find(k);
            if (it == edge_totals_.end()) return false;
            if (std::abs(v - it->second) > 1e-9 * std::max(1.0, std::abs(v))) return false;
        }
        return true;
    }

    void write_csv(std::ostream& out) const {
        out << "clock,edge_from,edge_to,mode,floats\n";
        for (const auto& r : rows_) {
            out << r.clock << ',' << r.from << ',' << r.to << ',' << r.mode << ',';
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%.17g", r.floats);
            out << buf << '\n';
        }
    }

private:
    std::vector<Row> rows_;
    std::map<std::pair<int, int>, double> edge_totals_;
    std::map<std::string, double> mode_totals_;
    double total_ = 0.0;
};

} // namespace dcl
