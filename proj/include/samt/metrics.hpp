// SPDX-License-Identifier: Apache-2.0
#pragma once

// Note-level precision / recall / F1 with optimal (maximum-cardinality)
// one-to-one matching, following mir_eval's transcription conventions.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "samt/errors.hpp"
#include "samt/tokenizer.hpp"

namespace samt {

enum class VelocityScale {
    FullRange,    // |v_est' - v_ref| <= tol * 127
    RelativeToRef // |v_est' - v_ref| <= tol * v_ref
};

struct MatchCriteria {
    double onset_tolerance = 0.05;
    double offset_ratio = 0.2;
    double offset_min_tolerance = 0.05;
    double velocity_tolerance = 0.1;
    bool use_offset = false;
    bool use_velocity = false;
    bool rescale_velocity = true;
    VelocityScale velocity_scale = VelocityScale::FullRange;

    static MatchCriteria onset() { return {}; }
    static MatchCriteria onset_offset() {
        MatchCriteria c;
        c.use_offset = true;
        return c;
    }
    static MatchCriteria onset_offset_velocity() {
        MatchCriteria c;
        c.use_offset = true;
        c.use_velocity = true;
        return c;
    }
};

struct EvalResult {
    double precision = 0;
    double recall = 0;
    double f1 = 0;
    std::size_t matched = 0;
    std::size_t reference = 0;
    std::size_t estimate = 0;
    std::vector<std::pair<std::size_t, std::size_t>> pairs; // (ref index, est index)
};

/// Maximum bipartite matching by augmenting paths. adjacency[r] lists the
/// estimate indices reference r may pair with. Returns est -> ref (or -1).
inline std::vector<long> maximum_matching(const std::vector<std::vector<std::size_t>>& adjacency, std::size_t n_est) {
    std::vector<long> est_to_ref(n_est, -1);
    std::vector<char> seen;
    std::function<bool(std::size_t)> augment = [&](std::size_t r) {
        for (std::size_t e : adjacency[r]) {
            if (seen[e]) continue;
            seen[e] = 1;
            if (est_to_ref[e] < 0 || augment(static_cast<std::size_t>(est_to_ref[e]))) {
                est_to_ref[e] = static_cast<long>(r);
                return true;
            }
        }
        return false;
    };
    for (std::size_t r = 0; r < adjacency.size(); ++r) {
        seen.assign(n_est, 0);
        augment(r);
    }
    return est_to_ref;
}

namespace detail {

/// Distances are compared after rounding to 4 decimals, as mir_eval does.
inline bool within(double distance, double tolerance) {
    return std::round(distance * 1e4) / 1e4 <= tolerance;
}

inline bool timing_valid(const NoteEvent& r, const NoteEvent& e, const MatchCriteria& c) {
    if (r.pitch != e.pitch) return false;
    if (!within(std::abs(e.onset - r.onset), c.onset_tolerance)) return false;
    if (c.use_offset) {
        const double tol = std::max(c.offset_min_tolerance, c.offset_ratio * (r.offset - r.onset));
        if (!within(std::abs(e.offset - r.offset), tol)) return false;
    }
    return true;
}

} // namespace detail

/// Least-squares fit ref ~ a * est + b over the given velocity pairs. With no
/// pairs the map is the identity; with constant estimates it is a pure shift.
inline std::pair<double, double> fit_velocity_map(const std::vector<std::pair<double, double>>& est_ref) {
    if (est_ref.empty()) return {1.0, 0.0};
    const double n = static_cast<double>(est_ref.size());
    double me = 0, mr = 0;
    for (auto [e, r] : est_ref) {
        me += e;
        mr += r;
    }
    me /= n;
    mr /= n;
    double see = 0, ser = 0;
    for (auto [e, r] : est_ref) {
        see += (e - me) * (e - me);
        ser += (e - me) * (r - mr);
    }
    if (see <= 1e-12) return {1.0, mr - me};
    const double a = ser / see;
    return {a, mr - a * me};
}

inline EvalResult match_notes(const std::vector<NoteEvent>& reference, const std::vector<NoteEvent>& estimate,
                              const MatchCriteria& c = {}) {
    require_input(c.onset_tolerance > 0 && c.offset_ratio > 0 && c.offset_min_tolerance > 0 && c.velocity_tolerance > 0,
                  "match tolerances must be positive");
    for (const auto& n : reference) validate(n);
    for (const auto& n : estimate) validate(n);

    EvalResult res;
    res.reference = reference.size();
    res.estimate = estimate.size();
    if (reference.empty() && estimate.empty()) {
        res.precision = res.recall = res.f1 = 1.0;
        return res;
    }

    std::vector<std::vector<std::size_t>> adj(reference.size());
    for (std::size_t r = 0; r < reference.size(); ++r)
        for (std::size_t e = 0; e < estimate.size(); ++e)
            if (detail::timing_valid(reference[r], estimate[e], c)) adj[r].push_back(e);

    if (c.use_velocity) {
        double a = 1.0, b = 0.0;
        if (c.rescale_velocity) {
            MatchCriteria onset_only = c;
            onset_only.use_offset = false;
            std::vector<std::vector<std::size_t>> onset_adj(reference.size());
            for (std::size_t r = 0; r < reference.size(); ++r) {
                for (std::size_t e = 0; e < estimate.size(); ++e)
                    if (detail::timing_valid(reference[r], estimate[e], onset_only)) onset_adj[r].push_back(e);
                std::stable_sort(onset_adj[r].begin(), onset_adj[r].end(), [&](std::size_t x, std::size_t y) {
                    return std::abs(estimate[x].onset - reference[r].onset) < std::abs(estimate[y].onset - reference[r].onset);
                });
            }
            const auto onset_match = maximum_matching(onset_adj, estimate.size());
            std::vector<std::pair<double, double>> pairs;
            for (std::size_t e = 0; e < onset_match.size(); ++e)
                if (onset_match[e] >= 0)
                    pairs.emplace_back(estimate[e].velocity, reference[static_cast<std::size_t>(onset_match[e])].velocity);
            std::tie(a, b) = fit_velocity_map(pairs);
        }
        for (std::size_t r = 0; r < adj.size(); ++r) {
            const double vr = reference[r].velocity;
            const double tol = c.velocity_scale == VelocityScale::FullRange ? c.velocity_tolerance * 127.0
                                                                           : c.velocity_tolerance * vr;
            std::erase_if(adj[r], [&](std::size_t e) {
                return !detail::within(std::abs(a * estimate[e].velocity + b - vr), tol);
            });
        }
    }

    const auto est_to_ref = maximum_matching(adj, estimate.size());
    for (std::size_t e = 0; e < est_to_ref.size(); ++e)
        if (est_to_ref[e] >= 0) res.pairs.emplace_back(static_cast<std::size_t>(est_to_ref[e]), e);
    std::sort(res.pairs.begin(), res.pairs.end());
    res.matched = res.pairs.size();
    res.precision = res.estimate ? static_cast<double>(res.matched) / static_cast<double>(res.estimate) : 0.0;
    res.recall = res.reference ? static_cast<double>(res.matched) / static_cast<double>(res.reference) : 0.0;
    const double s = res.precision + res.recall;
    res.f1 = s > 0 ? 2 * res.precision * res.recall / s : 0.0;
    return res;
}

inline constexpr std::array<const char*, 3> kCriterionNames{"onset", "onset_offset", "onset_offset_velocity"};

inline std::array<EvalResult, 3> evaluate_all(const std::vector<NoteEvent>& reference,
                                              const std::vector<NoteEvent>& estimate) {
    return {match_notes(reference, estimate, MatchCriteria::onset()),
            match_notes(reference, estimate, MatchCriteria::onset_offset()),
            match_notes(reference, estimate, MatchCriteria::onset_offset_velocity())};
}

inline std::string eval_csv(const std::array<EvalResult, 3>& results) {
    std::string out = "criterion,precision,recall,f1,matched,ref,est\n";
    char buf[256];
    for (std::size_t i = 0; i < results.size(); ++i) {
        const auto& r = results[i];
        std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f,%zu,%zu,%zu\n", kCriterionNames[i], r.precision, r.recall, r.f1,
                      r.matched, r.reference, r.estimate);
        out += buf;
    }
    return out;
}

inline std::string eval_table(const std::array<EvalResult, 3>& results) {
    std::string out = "criterion               precision  recall     f1         matched  ref    est\n";
    char buf[256];
    for (std::size_t i = 0; i < results.size(); ++i) {
        const auto& r = results[i];
        std::snprintf(buf, sizeof buf, "%-23s %-10.6f %-10.6f %-10.6f %-8zu %-6zu %zu\n", kCriterionNames[i], r.precision,
                      r.recall, r.f1, r.matched, r.reference, r.estimate);
        out += buf;
    }
    return out;
}

} // namespace samt
