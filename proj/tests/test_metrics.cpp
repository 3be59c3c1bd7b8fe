// SPDX-License-Identifier: Apache-2.0
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "samt/metrics.hpp"

using namespace samt;

namespace {

NoteEvent note(double on, double off, int pitch, int vel = 80) { return {on, off, pitch, vel}; }

// Notes on a 10 ms grid over two pitches: many conflicting candidates.
std::vector<NoteEvent> random_notes(std::mt19937_64& rng, std::size_t n) {
    std::uniform_int_distribution<int> onset_ms(0, 30), dur(2, 30), pitch(60, 61), vel(20, 120);
    std::vector<NoteEvent> out;
    for (std::size_t i = 0; i < n; ++i) {
        const int on = onset_ms(rng) * 10;
        out.push_back(note(on / 1000.0, (on + dur(rng) * 10) / 1000.0, pitch(rng), vel(rng)));
    }
    return out;
}

// Like a played piano part: a pitch never sounds twice at once.
std::vector<NoteEvent> separated_notes(std::mt19937_64& rng, std::size_t n) {
    std::uniform_int_distribution<int> pitch(55, 65), vel(20, 120), dur(10, 80);
    std::vector<NoteEvent> out;
    double t = 0;
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(note(t, t + dur(rng) / 100.0, pitch(rng), vel(rng)));
        t += 0.9;
    }
    return out;
}

} // namespace

TEST(MatchNotes, IdenticalListsScorePerfectly) {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        const auto notes = separated_notes(rng, 1 + trial % 6);
        for (const auto& r : evaluate_all(notes, notes)) EXPECT_EQ(r.f1, 1.0);
    }
}

TEST(MatchNotes, OnsetShiftBeyondFiftyMilliseconds) {
    const std::vector<NoteEvent> ref{note(1.0, 1.5, 60)};
    EXPECT_EQ(match_notes(ref, {note(1.06, 1.56, 60)}).f1, 0.0);
    EXPECT_EQ(match_notes(ref, {note(1.05, 1.55, 60)}).f1, 1.0); // exactly at the threshold
    EXPECT_EQ(match_notes(ref, {note(1.0, 1.5, 61)}).f1, 0.0);
}

TEST(MatchNotes, OptimalMatchingBeatsGreedy) {
    // Greedy nearest-first would pair r0 with e0 (10 ms) and leave r1 unmatched.
    const std::vector<NoteEvent> ref{note(0.10, 0.5, 60), note(0.15, 0.5, 60)};
    const std::vector<NoteEvent> est{note(0.11, 0.5, 60), note(0.06, 0.5, 60)};
    const auto r = match_notes(ref, est);
    EXPECT_EQ(r.matched, 2u);
    EXPECT_EQ(r.f1, 1.0);
    EXPECT_EQ(r.pairs, (std::vector<std::pair<std::size_t, std::size_t>>{{0, 1}, {1, 0}}));
    EXPECT_EQ(oracle::exhaustive_matching({{true, true}, {true, false}}), 2u);
}

TEST(EvaluateAll, DoubledOffsetsOnlyHurtOffsetCriteria) {
    const std::vector<NoteEvent> ref{note(0.0, 0.5, 60), note(1.0, 1.2, 64), note(2.0, 3.0, 67)};
    std::vector<NoteEvent> est = ref;
    for (auto& n : est) n.offset = n.onset + 2 * (n.offset - n.onset) + 0.5;
    const auto r = evaluate_all(ref, est);
    EXPECT_EQ(r[0].f1, 1.0);
    EXPECT_LT(r[1].f1, 1.0);
    EXPECT_LT(r[2].f1, 1.0);
}

TEST(EvaluateAll, AdditiveVelocityShiftIsAbsorbed) {
    const std::vector<NoteEvent> ref{note(0.0, 0.5, 60, 30), note(1.0, 1.2, 64, 60), note(2.0, 3.0, 67, 85)};
    std::vector<NoteEvent> est = ref;
    for (auto& n : est) n.velocity += 40;
    EXPECT_EQ(evaluate_all(ref, est)[2].f1, 1.0);
    auto raw = MatchCriteria::onset_offset_velocity();
    raw.rescale_velocity = false;
    EXPECT_EQ(match_notes(ref, est, raw).f1, 0.0);
}

TEST(MatchNotes, VelocityScaleFlag) {
    const std::vector<NoteEvent> ref{note(0.0, 0.5, 60, 100)};
    auto c = MatchCriteria::onset_offset_velocity();
    c.rescale_velocity = false;
    EXPECT_EQ(match_notes(ref, {note(0.0, 0.5, 60, 111)}, c).matched, 1u); // 11 <= 12.7
    EXPECT_EQ(match_notes(ref, {note(0.0, 0.5, 60, 113)}, c).matched, 0u);
    c.velocity_scale = VelocityScale::RelativeToRef;
    EXPECT_EQ(match_notes(ref, {note(0.0, 0.5, 60, 110)}, c).matched, 1u); // 10 <= 10
    EXPECT_EQ(match_notes(ref, {note(0.0, 0.5, 60, 111)}, c).matched, 0u);
}

TEST(MatchNotes, OffsetToleranceScalesWithDuration) {
    const std::vector<NoteEvent> long_ref{note(0.0, 2.0, 60)}; // 20% of 2 s = 0.4 s
    const auto c = MatchCriteria::onset_offset();
    EXPECT_EQ(match_notes(long_ref, {note(0.0, 2.4, 60)}, c).matched, 1u);
    EXPECT_EQ(match_notes(long_ref, {note(0.0, 2.41, 60)}, c).matched, 0u);
    const std::vector<NoteEvent> short_ref{note(0.0, 0.1, 60)}; // floor of 50 ms applies
    EXPECT_EQ(match_notes(short_ref, {note(0.0, 0.15, 60)}, c).matched, 1u);
    EXPECT_EQ(match_notes(short_ref, {note(0.0, 0.16, 60)}, c).matched, 0u);
}

TEST(MatchNotes, EmptyInputs) {
    const std::vector<NoteEvent> none, one{note(0, 1, 60)};
    const auto both = match_notes(none, none);
    EXPECT_EQ(both.precision, 1.0);
    EXPECT_EQ(both.recall, 1.0);
    EXPECT_EQ(both.f1, 1.0);
    EXPECT_EQ(match_notes(one, none).f1, 0.0);
    EXPECT_EQ(match_notes(none, one).f1, 0.0);
}

TEST(MatchNotes, RejectsInvalidInput) {
    const std::vector<NoteEvent> bad{note(1.0, 0.5, 60)};
    EXPECT_THROW(match_notes(bad, bad), InputError);
    MatchCriteria c;
    c.onset_tolerance = 0;
    EXPECT_THROW(match_notes({}, {}, c), InputError);
}

TEST(MatchNotes, CountsAreConsistent) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 100; ++trial) {
        const auto ref = random_notes(rng, trial % 7), est = random_notes(rng, (trial / 7) % 7);
        for (const auto& r : evaluate_all(ref, est)) {
            EXPECT_LE(r.matched, std::min(r.reference, r.estimate));
            const double pr = r.precision + r.recall;
            EXPECT_DOUBLE_EQ(r.f1, pr > 0 ? 2 * r.precision * r.recall / pr : (ref.empty() && est.empty() ? 1.0 : 0.0));
        }
    }
}

TEST(Properties, MatchingIsOptimal) {
    std::mt19937_64 rng(3);
    for (int seed = 0; seed < 200; ++seed) {
        std::uniform_int_distribution<std::size_t> size(0, 6);
        const auto ref = random_notes(rng, size(rng)), est = random_notes(rng, size(rng));
        // Validity from integer milliseconds: same pitch and onsets at most 50 ms apart.
        std::vector<std::vector<bool>> valid(ref.size(), std::vector<bool>(est.size()));
        for (std::size_t r = 0; r < ref.size(); ++r)
            for (std::size_t e = 0; e < est.size(); ++e)
                valid[r][e] = ref[r].pitch == est[e].pitch &&
                              std::labs(std::lround(ref[r].onset * 1000) - std::lround(est[e].onset * 1000)) <= 50;
        EXPECT_EQ(match_notes(ref, est).matched, oracle::exhaustive_matching(valid)) << "seed " << seed;
    }
}

TEST(Properties, WiderTolerancesNeverLoseMatches) {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        const auto ref = random_notes(rng, 5), est = random_notes(rng, 5);
        auto c = MatchCriteria::onset_offset_velocity();
        c.rescale_velocity = false;
        std::size_t last = match_notes(ref, est, c).matched;
        for (int widen = 0; widen < 4; ++widen) {
            (widen == 0 ? c.onset_tolerance : widen == 1 ? c.offset_ratio : widen == 2 ? c.offset_min_tolerance
                                                                                       : c.velocity_tolerance) *= 3;
            const std::size_t now = match_notes(ref, est, c).matched;
            EXPECT_GE(now, last);
            last = now;
        }
    }
}

TEST(Properties, CriteriaAreNested) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const auto ref = random_notes(rng, 6), est = random_notes(rng, 6);
        const auto r = evaluate_all(ref, est);
        EXPECT_GE(r[0].matched, r[1].matched);
        EXPECT_GE(r[1].matched, r[2].matched);
    }
}

TEST(Properties, SwappingSidesSwapsPrecisionAndRecall) {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 200; ++trial) {
        const auto ref = random_notes(rng, trial % 5), est = random_notes(rng, 1 + trial % 4);
        const auto a = match_notes(ref, est), b = match_notes(est, ref);
        EXPECT_EQ(a.precision, b.recall);
        EXPECT_EQ(a.recall, b.precision);
        EXPECT_EQ(a.matched, b.matched);
    }
}

TEST(VelocityFit, Cases) {
    EXPECT_EQ(fit_velocity_map({}), (std::pair<double, double>{1.0, 0.0}));
    const auto shift = fit_velocity_map({{50, 70}, {50, 90}});
    EXPECT_DOUBLE_EQ(shift.first, 1.0);
    EXPECT_DOUBLE_EQ(shift.second, 30.0);
    const auto exact = fit_velocity_map({{10, 25}, {20, 45}, {40, 85}});
    EXPECT_NEAR(exact.first, 2.0, 1e-12);
    EXPECT_NEAR(exact.second, 5.0, 1e-12);
}

TEST(Report, CsvAndTable) {
    const std::vector<NoteEvent> ref{note(0, 1, 60), note(2, 3, 62)}, est{note(0, 1, 60)};
    const auto r = evaluate_all(ref, est);
    EXPECT_EQ(eval_csv(r), "criterion,precision,recall,f1,matched,ref,est\n"
                           "onset,1.000000,0.500000,0.666667,1,2,1\n"
                           "onset_offset,1.000000,0.500000,0.666667,1,2,1\n"
                           "onset_offset_velocity,1.000000,0.500000,0.666667,1,2,1\n");
    EXPECT_NE(eval_table(r).find("onset_offset_velocity"), std::string::npos);
}
