#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "diffueraser/planner.hpp"
#include "helpers.hpp"

using namespace diffueraser;

namespace {

// brute-force coverage oracle: mark every frame of every span
bool exactly_covers(const std::vector<ClipSpan>& spans, int64_t n) {
    std::vector<int> hits(static_cast<size_t>(n), 0);
    for (const ClipSpan& s : spans) {
        if (s.start >= s.end) return false;
        for (int64_t f = s.start; f < s.end; ++f) {
            if (f < 0 || f >= n) return false;
            hits[static_cast<size_t>(f)]++;
        }
    }
    for (int h : hits)
        if (h != 1) return false;
    return true;
}

std::set<int64_t> interior_boundaries(const std::vector<ClipSpan>& spans, int64_t n) {
    std::set<int64_t> b;
    for (const ClipSpan& s : spans) {
        if (s.start > 0) b.insert(s.start);
        if (s.end < n) b.insert(s.end);
    }
    return b;
}

}  // namespace

TEST_CASE("partition_clips: spec examples") {
    auto p0 = partition_clips(44, 22, 0);
    REQUIRE(p0.size() == 2);
    CHECK(p0[0] == ClipSpan{0, 22});
    CHECK(p0[1] == ClipSpan{22, 44});

    auto p1 = partition_clips(44, 22, 11);
    REQUIRE(p1.size() == 3);
    CHECK(p1[0] == ClipSpan{0, 11});
    CHECK(p1[1] == ClipSpan{11, 33});
    CHECK(p1[2] == ClipSpan{33, 44});

    auto p2 = partition_clips(10, 22, 0);
    REQUIRE(p2.size() == 1);
    CHECK(p2[0] == ClipSpan{0, 10});
}

TEST_CASE("partition_clips: errors and span-length invariant") {
    CHECK_THROWS_AS(partition_clips(10, 22, 22), std::invalid_argument);
    CHECK_THROWS_AS(partition_clips(10, 22, -1), std::invalid_argument);
    CHECK_THROWS_AS(partition_clips(10, 0, 0), std::invalid_argument);
    CHECK_THROWS_AS(partition_clips(0, 4, 0), std::invalid_argument);
    for (int64_t n : {1, 5, 21, 22, 23, 44, 100})
        for (int offset : {0, 3, 11, 21}) {
            auto spans = partition_clips(n, 22, offset);
            CHECK(exactly_covers(spans, n));
            for (const ClipSpan& s : spans) REQUIRE(s.length() <= 22);
        }
}

TEST_CASE("staggered_plan: boundary staggering matches the clip midpoint") {
    TemporalPlan plan = staggered_plan(44, 22, 2);
    REQUIRE(plan.per_timestep.size() == 2);
    CHECK(interior_boundaries(plan.per_timestep[0], 44) == std::set<int64_t>{22});
    CHECK(interior_boundaries(plan.per_timestep[1], 44) == std::set<int64_t>{11, 33});

    TemporalPlan single = staggered_plan(44, 22, 1);
    REQUIRE(single.per_timestep.size() == 1);
    CHECK(interior_boundaries(single.per_timestep[0], 44) == std::set<int64_t>{22});
}

TEST_CASE("staggered_plan: per-timestep coverage for all n in [1,100]") {
    for (int64_t n = 1; n <= 100; ++n)
        for (int steps : {1, 2, 3}) {
            TemporalPlan plan = staggered_plan(n, 22, steps);
            REQUIRE(plan.per_timestep.size() == static_cast<size_t>(steps));
            for (const auto& spans : plan.per_timestep) REQUIRE(exactly_covers(spans, n));
        }
}

TEST_CASE("staggered_plan: even/odd interior boundaries disjoint when F divides n") {
    for (int F : {4, 8, 22})
        for (int64_t mult : {1, 2, 3, 5}) {
            int64_t n = F * mult;
            TemporalPlan plan = staggered_plan(n, F, 2);
            auto even = interior_boundaries(plan.per_timestep[0], n);
            auto odd = interior_boundaries(plan.per_timestep[1], n);
            for (int64_t b : even) REQUIRE(odd.count(b) == 0);
        }
}

TEST_CASE("sample_preinference_frames: stride rule") {
    auto idx = sample_preinference_frames(88, 22);
    REQUIRE(idx.size() == 22);
    for (size_t i = 0; i < idx.size(); ++i) REQUIRE(idx[i] == static_cast<int64_t>(4 * i));

    auto all = sample_preinference_frames(22, 22);
    REQUIRE(all.size() == 22);
    for (size_t i = 0; i < all.size(); ++i) REQUIRE(all[i] == static_cast<int64_t>(i));

    auto one = sample_preinference_frames(1, 22);
    REQUIRE(one.size() == 1);
    CHECK(one[0] == 0);

    // count never exceeds the clip length
    for (int64_t n = 1; n <= 200; ++n)
        for (int F : {4, 8, 22})
            REQUIRE(sample_preinference_frames(n, F).size() <= static_cast<size_t>(F));
}

TEST_CASE("anchor_plan: intersections and soundness") {
    TemporalPlan plan = staggered_plan(44, 22, 2);
    plan.preinference_indices.clear();
    for (int64_t i = 0; i < 44; i += 2) plan.preinference_indices.push_back(i);
    plan = anchor_plan(plan);

    // span [22,44) at the even timestep holds anchors {22,24,...,42}
    const auto& spans0 = plan.per_timestep[0];
    REQUIRE(spans0[1] == ClipSpan{22, 44});
    std::vector<int64_t> expect;
    for (int64_t i = 22; i < 44; i += 2) expect.push_back(i);
    CHECK(plan.anchor_map[0][1] == expect);

    // anchors live inside their spans; union per timestep = preinference set
    for (size_t t = 0; t < plan.per_timestep.size(); ++t) {
        std::set<int64_t> seen;
        for (size_t ci = 0; ci < plan.per_timestep[t].size(); ++ci) {
            for (int64_t a : plan.anchor_map[t][ci]) {
                REQUIRE(plan.per_timestep[t][ci].contains(a));
                seen.insert(a);
            }
        }
        std::set<int64_t> want(plan.preinference_indices.begin(),
                               plan.preinference_indices.end());
        REQUIRE(seen == want);
    }
}

TEST_CASE("anchor_plan: disabled guidance leaves every anchor set empty") {
    TemporalPlan plan = staggered_plan(30, 8, 3);
    plan = anchor_plan(plan);
    for (const auto& per_clip : plan.anchor_map)
        for (const auto& anchors : per_clip) REQUIRE(anchors.empty());
}

TEST_CASE("anchor_plan: stride-4 anchors inside a leading half clip") {
    TemporalPlan plan = staggered_plan(44, 22, 2);
    for (int64_t i = 0; i < 44; i += 4) plan.preinference_indices.push_back(i);
    plan = anchor_plan(plan);
    REQUIRE(plan.per_timestep[1][0] == ClipSpan{0, 11});
    CHECK(plan.anchor_map[1][0] == std::vector<int64_t>{0, 4, 8});
}

TEST_CASE("plans are pure: same inputs give identical JSON") {
    TemporalPlan a = staggered_plan(77, 22, 5);
    a.preinference_indices = sample_preinference_frames(77, 22);
    a = anchor_plan(a);
    TemporalPlan b = staggered_plan(77, 22, 5);
    b.preinference_indices = sample_preinference_frames(77, 22);
    b = anchor_plan(b);
    CHECK(plan_to_json(a).dump() == plan_to_json(b).dump());
}

TEST_CASE("plan JSON carries the documented fields") {
    TemporalPlan plan = staggered_plan(44, 22, 2);
    plan.preinference_indices = sample_preinference_frames(44, 22);
    plan = anchor_plan(plan);
    auto j = plan_to_json(plan);
    CHECK(j["n_frames"] == 44);
    CHECK(j["clip_len"] == 22);
    CHECK(j["steps"] == 2);
    CHECK(j["per_timestep"][0][0] == nlohmann::json::array({0, 22}));
    CHECK(j["per_timestep"][1][0] == nlohmann::json::array({0, 11}));
    CHECK(j.contains("preinference"));
    CHECK(j.contains("anchors"));
}
