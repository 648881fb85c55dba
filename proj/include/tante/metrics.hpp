#pragma once

// Evaluation metrics and the rank statistics used by the radius analysis.
// Everything here is plain double arithmetic on finished predictions; no
// autodiff, no model types.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "tante/tensor.hpp"

namespace tante {

// Mean over channels of the mean squared difference over time and grid.
// With equal counts per channel this equals the overall mean.
inline double mse(const Tensor& pred, const Tensor& truth) {
    check(pred.shape() == truth.shape(), "mse: shape mismatch");
    check(pred.size() > 0, "mse: empty input");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.data().size(); ++i) {
        const double d = pred.data()[i] - truth.data()[i];
        acc += d * d;
    }
    return acc / static_cast<double>(pred.size());
}

struct RelL2Result {
    double aggregate = 0.0;
    std::vector<double> per_channel;         // entries for excluded channels are 0
    std::vector<std::int64_t> zero_channels;  // truth had no energy there
};

// Per-channel ||pred - truth|| / ||truth|| with norms over the whole
// (T,H,W) block, averaged over the channels that have truth energy.
inline RelL2Result rel_l2_detailed(const Tensor& pred, const Tensor& truth) {
    check(pred.shape() == truth.shape(), "rel_l2: shape mismatch");
    check(pred.rank() >= 1 && pred.size() > 0, "rel_l2: empty input");
    const std::int64_t D = pred.extent(pred.rank() - 1);

    RelL2Result r;
    r.per_channel.assign(static_cast<std::size_t>(D), 0.0);
    std::vector<double> err2(static_cast<std::size_t>(D), 0.0);
    std::vector<double> ref2(static_cast<std::size_t>(D), 0.0);
    for (std::int64_t p = 0; p < pred.size(); ++p) {
        const std::size_t d = static_cast<std::size_t>(p % D);
        const double e = pred.data()[static_cast<std::size_t>(p)] -
                         truth.data()[static_cast<std::size_t>(p)];
        const double t = truth.data()[static_cast<std::size_t>(p)];
        err2[d] += e * e;
        ref2[d] += t * t;
    }
    double sum = 0.0;
    std::int64_t used = 0;
    for (std::int64_t d = 0; d < D; ++d) {
        if (ref2[static_cast<std::size_t>(d)] == 0.0) {
            r.zero_channels.push_back(d);
            continue;
        }
        const double v = std::sqrt(err2[static_cast<std::size_t>(d)] /
                                   ref2[static_cast<std::size_t>(d)]);
        r.per_channel[static_cast<std::size_t>(d)] = v;
        sum += v;
        used++;
    }
    check(used > 0, "rel_l2: truth is identically zero in every channel");
    r.aggregate = sum / static_cast<double>(used);
    return r;
}

inline double rel_l2(const Tensor& pred, const Tensor& truth) {
    return rel_l2_detailed(pred, truth).aggregate;
}

// Relative L2 restricted to each time slice separately: how error grows
// along the rollout.
inline std::vector<double> error_accumulation(const Tensor& pred, const Tensor& truth) {
    check(pred.shape() == truth.shape(), "error_accumulation: shape mismatch");
    check(pred.rank() == 4 && pred.extent(0) >= 1,
          "error_accumulation: expected (T,H,W,D) with T >= 1");
    std::vector<double> out;
    for (std::int64_t t = 0; t < pred.extent(0); ++t) {
        NoGradGuard ng;
        out.push_back(rel_l2(slice(pred, 0, t, 1), slice(truth, 0, t, 1)));
    }
    return out;
}

// Flatness of the temporal power spectrum in [0,1]: 0 for a field constant
// in time (all power in the DC bin), 1 for power spread evenly over all T
// frequency bins. Per-location normalized-power entropy base T, averaged
// over grid and channels; zero-power locations contribute 0.
inline double spectral_entropy(const Tensor& u) {
    check(u.rank() == 4, "spectral_entropy: expected (T,H,W,D)");
    const std::int64_t T = u.extent(0);
    check(T >= 2, "spectral_entropy: need at least two frames");
    const std::int64_t M = u.extent(1) * u.extent(2) * u.extent(3);
    const double log2T = std::log2(static_cast<double>(T));
    constexpr double two_pi = 6.283185307179586476925286766559;

    double total = 0.0;
    std::vector<double> series(static_cast<std::size_t>(T));
    std::vector<double> power(static_cast<std::size_t>(T));
    for (std::int64_t loc = 0; loc < M; ++loc) {
        for (std::int64_t t = 0; t < T; ++t) {
            series[static_cast<std::size_t>(t)] =
                u.data()[static_cast<std::size_t>(t * M + loc)];
        }
        double psum = 0.0;
        for (std::int64_t f = 0; f < T; ++f) {
            double re = 0.0, im = 0.0;
            for (std::int64_t t = 0; t < T; ++t) {
                const double ang = -two_pi * static_cast<double>(f) *
                                   static_cast<double>(t) / static_cast<double>(T);
                re += series[static_cast<std::size_t>(t)] * std::cos(ang);
                im += series[static_cast<std::size_t>(t)] * std::sin(ang);
            }
            power[static_cast<std::size_t>(f)] = re * re + im * im;
            psum += power[static_cast<std::size_t>(f)];
        }
        if (psum <= 0.0) {
            continue;  // silent location: entropy 0 by the 0*log0 convention
        }
        double h = 0.0;
        for (std::int64_t f = 0; f < T; ++f) {
            const double p = power[static_cast<std::size_t>(f)] / psum;
            if (p > 0.0) {
                h -= p * std::log2(p);
            }
        }
        total += h / log2T;
    }
    return total / static_cast<double>(M);
}

// ---------------------------------------------------------------------------
// Mann-Whitney U

struct MannWhitneyResult {
    double U = 0.0;
    double p = 1.0;
    bool exact = false;  // enumeration (tie-free, small n) vs normal approximation
};

namespace detail {

// Midranks of the pooled sample: tied values share the average of the
// positions they span.
inline std::vector<double> midranks(const std::vector<double>& pooled, bool* had_ties) {
    const std::size_t n = pooled.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return pooled[a] < pooled[b]; });
    std::vector<double> ranks(n);
    *had_ties = false;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && pooled[order[j + 1]] == pooled[order[i]]) j++;
        if (j > i) *had_ties = true;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    return ranks;
}

// Null counts of U over all rank subsets, by the standard recurrence
// N(n1,n2,u) = N(n1-1,n2,u-n2) + N(n1,n2-1,u). Row [u] holds the number of
// assignments with U1 = u.
inline std::vector<double> u_null_counts(std::int64_t n1, std::int64_t n2) {
    const std::int64_t umax = n1 * n2;
    std::vector<std::vector<double>> prev_row(static_cast<std::size_t>(n1) + 1);
    std::vector<std::vector<double>> row(static_cast<std::size_t>(n1) + 1);
    // table[a][u] for b = 0: only U = 0 possible.
    for (std::int64_t a = 0; a <= n1; ++a) {
        prev_row[static_cast<std::size_t>(a)].assign(static_cast<std::size_t>(umax) + 1, 0.0);
        prev_row[static_cast<std::size_t>(a)][0] = 1.0;
    }
    for (std::int64_t b = 1; b <= n2; ++b) {
        for (std::int64_t a = 0; a <= n1; ++a) {
            auto& cur = row[static_cast<std::size_t>(a)];
            cur.assign(static_cast<std::size_t>(umax) + 1, 0.0);
            for (std::int64_t u = 0; u <= umax; ++u) {
                double v = prev_row[static_cast<std::size_t>(a)][static_cast<std::size_t>(u)];
                if (a >= 1 && u >= b) {
                    // The largest pooled value joins sample a: U1 gains n2' = b.
                    v += row[static_cast<std::size_t>(a - 1)][static_cast<std::size_t>(u - b)];
                }
                cur[static_cast<std::size_t>(u)] = v;
            }
        }
        std::swap(prev_row, row);
    }
    return prev_row[static_cast<std::size_t>(n1)];
}

}  // namespace detail

inline std::string significance_stars(double p) {
    if (p < 0.001) return "***";
    if (p < 0.01) return "**";
    if (p < 0.05) return "*";
    return "";
}

// Two-sided Mann-Whitney with U = min(U1, U2). Exact p by enumeration of
// the null U distribution when both samples have at most 8 values and no
// ties; otherwise midranks feed the normal approximation with
// mu = n1 n2 / 2, sigma = sqrt(n1 n2 (n1+n2+1) / 12).
inline MannWhitneyResult mann_whitney_u(const std::vector<double>& a,
                                        const std::vector<double>& b) {
    check(!a.empty() && !b.empty(), "mann_whitney_u: empty sample");
    const std::int64_t n1 = static_cast<std::int64_t>(a.size());
    const std::int64_t n2 = static_cast<std::int64_t>(b.size());

    std::vector<double> pooled(a);
    pooled.insert(pooled.end(), b.begin(), b.end());
    bool had_ties = false;
    const std::vector<double> ranks = detail::midranks(pooled, &had_ties);
    double r1 = 0.0;
    for (std::int64_t i = 0; i < n1; ++i) {
        r1 += ranks[static_cast<std::size_t>(i)];
    }
    const double nn = static_cast<double>(n1 * n2);
    const double u1 = nn + static_cast<double>(n1 * (n1 + 1)) / 2.0 - r1;
    const double u2 = nn - u1;

    MannWhitneyResult res;
    res.U = std::min(u1, u2);
    if (!had_ties && n1 <= 8 && n2 <= 8) {
        const std::vector<double> counts = detail::u_null_counts(n1, n2);
        double total = 0.0, extreme = 0.0;
        const std::int64_t umax = n1 * n2;
        for (std::int64_t u = 0; u <= umax; ++u) {
            const double c = counts[static_cast<std::size_t>(u)];
            total += c;
            const double lo = std::min<double>(static_cast<double>(u),
                                               static_cast<double>(umax - u));
            if (lo <= res.U + 1e-12) {
                extreme += c;
            }
        }
        res.p = extreme / total;
        res.exact = true;
    } else {
        const double mu = nn / 2.0;
        const double sigma =
            std::sqrt(nn * static_cast<double>(n1 + n2 + 1) / 12.0);
        const double z = (res.U - mu) / sigma;
        res.p = std::min(1.0, std::erfc(-z / std::sqrt(2.0)));  // 2 * Phi(z), z <= 0
        res.exact = false;
    }
    return res;
}

// ---------------------------------------------------------------------------
// Radius distribution report

struct GroupSummary {
    std::string name;
    std::int64_t count = 0;
    double q1 = 0.0;
    double median = 0.0;
    double q3 = 0.0;
};

struct PairTest {
    std::string a;
    std::string b;
    double U = 0.0;
    double p = 1.0;
    std::string stars;
};

struct RadiusReport {
    std::vector<GroupSummary> groups;
    std::vector<PairTest> tests;       // adjacent included groups
    std::vector<std::string> excluded;  // fewer than 2 samples
};

// Linear-interpolation quantile of a sorted copy (the numpy default).
inline double quantile(std::vector<double> x, double q) {
    check(!x.empty(), "quantile: empty sample");
    std::sort(x.begin(), x.end());
    const double h = q * static_cast<double>(x.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(h);
    if (lo + 1 >= x.size()) return x.back();
    const double frac = h - static_cast<double>(lo);
    return x[lo] + frac * (x[lo + 1] - x[lo]);
}

inline RadiusReport radius_report(
    const std::vector<std::pair<std::string, std::vector<double>>>& groups) {
    check(!groups.empty(), "radius_report: no groups");
    RadiusReport rep;
    for (const auto& [name, samples] : groups) {
        if (samples.size() < 2) {
            rep.excluded.push_back(name);
            continue;
        }
        GroupSummary g;
        g.name = name;
        g.count = static_cast<std::int64_t>(samples.size());
        g.q1 = quantile(samples, 0.25);
        g.median = quantile(samples, 0.5);
        g.q3 = quantile(samples, 0.75);
        rep.groups.push_back(g);
    }
    for (std::size_t i = 0; i + 1 < rep.groups.size(); ++i) {
        const auto* ga = &groups[0];
        const auto* gb = &groups[0];
        for (const auto& g : groups) {
            if (g.first == rep.groups[i].name) ga = &g;
            if (g.first == rep.groups[i + 1].name) gb = &g;
        }
        MannWhitneyResult mw = mann_whitney_u(ga->second, gb->second);
        rep.tests.push_back(
            {rep.groups[i].name, rep.groups[i + 1].name, mw.U, mw.p, significance_stars(mw.p)});
    }
    return rep;
}

inline void write_radius_csv(const std::string& path, const RadiusReport& rep) {
    std::ofstream out(path, std::ios::trunc);
    check(out.good(), "radius report: cannot open " + path);
    out << "group,count,q1,median,q3,p_vs_next,stars\n";
    char buf[256];
    for (std::size_t i = 0; i < rep.groups.size(); ++i) {
        const GroupSummary& g = rep.groups[i];
        if (i < rep.tests.size()) {
            std::snprintf(buf, sizeof(buf), "%s,%lld,%.12g,%.12g,%.12g,%.12g,%s\n",
                          g.name.c_str(), static_cast<long long>(g.count), g.q1, g.median,
                          g.q3, rep.tests[i].p, rep.tests[i].stars.c_str());
        } else {
            std::snprintf(buf, sizeof(buf), "%s,%lld,%.12g,%.12g,%.12g,,\n", g.name.c_str(),
                          static_cast<long long>(g.count), g.q1, g.median, g.q3);
        }
        out << buf;
    }
    check(out.good(), "radius report: write failed for " + path);
}

}  // namespace tante
