#ifndef DIFFUERASER_PLANNER_HPP
#define DIFFUERASER_PLANNER_HPP

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace diffueraser {

struct ClipSpan {
    int64_t start = 0;  // inclusive
    int64_t end = 0;    // exclusive

    int64_t length() const { return end - start; }
    bool contains(int64_t f) const { return f >= start && f < end; }
    bool operator==(const ClipSpan& o) const { return start == o.start && end == o.end; }
};

// Per-timestep clip partitions (denoising order), pre-inference sample
// indices, and the anchors each clip carries.
struct TemporalPlan {
    int64_t n_frames = 0;
    int clip_len = 0;
    std::vector<std::vector<ClipSpan>> per_timestep;
    std::vector<int64_t> preinference_indices;
    std::vector<std::vector<std::vector<int64_t>>> anchor_map;  // [timestep][clip]
};

// Tiles [0, n_frames) with clip_len-wide spans starting at `offset`; a short
// leading span covers [0, offset) and the tail keeps the remainder. No
// wraparound: the video is not treated as circular.
inline std::vector<ClipSpan> partition_clips(int64_t n_frames, int clip_len, int offset) {
    if (clip_len < 1) throw std::invalid_argument("partition_clips: clip_len must be >= 1");
    if (offset < 0 || offset >= clip_len)
        throw std::invalid_argument("partition_clips: offset must be in [0, clip_len)");
    if (n_frames < 1) throw std::invalid_argument("partition_clips: n_frames must be >= 1");
    std::vector<ClipSpan> spans;
    int64_t pos = 0;
    if (offset > 0 && offset < n_frames) {
        spans.push_back({0, offset});
        pos = offset;
    }
    while (pos < n_frames) {
        int64_t end = std::min<int64_t>(pos + clip_len, n_frames);
        spans.push_back({pos, end});
        pos = end;
    }
    return spans;
}

// Denoising-order position i uses offset 0 when even and half a clip when
// odd, so consecutive timesteps place their clip boundaries apart.
inline TemporalPlan staggered_plan(int64_t n_frames, int clip_len, int n_inference_steps) {
    if (n_inference_steps < 1)
        throw std::invalid_argument("staggered_plan: steps must be >= 1");
    TemporalPlan plan;
    plan.n_frames = n_frames;
    plan.clip_len = clip_len;
    plan.per_timestep.reserve(static_cast<size_t>(n_inference_steps));
    for (int i = 0; i < n_inference_steps; ++i) {
        int offset = (i % 2 == 0) ? 0 : clip_len / 2;
        plan.per_timestep.push_back(partition_clips(n_frames, clip_len, offset));
    }
    return plan;
}

// Stride ceil(n/clip_len): the sampled frames fit a single clip.
inline std::vector<int64_t> sample_preinference_frames(int64_t n_frames, int clip_len) {
    if (n_frames < 1) throw std::invalid_argument("sample_preinference_frames: n_frames >= 1");
    if (clip_len < 1) throw std::invalid_argument("sample_preinference_frames: clip_len >= 1");
    int64_t stride = (n_frames + clip_len - 1) / clip_len;
    std::vector<int64_t> idx;
    for (int64_t i = 0; i < n_frames; i += stride) idx.push_back(i);
    return idx;
}

// Fills anchor_map: for each clip span the contained pre-inference indices.
inline TemporalPlan anchor_plan(TemporalPlan plan) {
    plan.anchor_map.clear();
    plan.anchor_map.reserve(plan.per_timestep.size());
    for (const auto& spans : plan.per_timestep) {
        std::vector<std::vector<int64_t>> per_clip;
        per_clip.reserve(spans.size());
        for (const ClipSpan& s : spans) {
            std::vector<int64_t> anchors;
            for (int64_t f : plan.preinference_indices)
                if (s.contains(f)) anchors.push_back(f);
            per_clip.push_back(std::move(anchors));
        }
        plan.anchor_map.push_back(std::move(per_clip));
    }
    return plan;
}

inline nlohmann::json plan_to_json(const TemporalPlan& plan) {
    nlohmann::json j;
    j["n_frames"] = plan.n_frames;
    j["clip_len"] = plan.clip_len;
    j["steps"] = plan.per_timestep.size();
    nlohmann::json ts = nlohmann::json::array();
    for (const auto& spans : plan.per_timestep) {
        nlohmann::json row = nlohmann::json::array();
        for (const ClipSpan& s : spans) row.push_back({s.start, s.end});
        ts.push_back(std::move(row));
    }
    j["per_timestep"] = std::move(ts);
    j["preinference"] = plan.preinference_indices;
    j["anchors"] = plan.anchor_map;
    return j;
}

}  // namespace diffueraser

#endif
