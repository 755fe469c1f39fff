#ifndef DIFFUERASER_PIPELINE_HPP
#define DIFFUERASER_PIPELINE_HPP

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "latent_codec.hpp"
#include "network.hpp"
#include "planner.hpp"
#include "prior.hpp"
#include "schedule.hpp"
#include "tensor.hpp"
#include "video_io.hpp"

namespace diffueraser {

// usage/configuration problems; the CLI maps these to exit code 2
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct InferenceConfig {
    int clip_len = 22;
    int steps = 50;
    uint64_t seed = 0;
    double prior_strength = 1.0;
    double blur_sigma = 2.0;
    bool guidance_enabled = true;
    bool bypass_diffusion = false;
    std::string external_prior_cmd;  // empty = builtin propagation prior
    std::string work_dir;            // scratch for the external prior exchange

    void validate() const {
        if (clip_len < 1) throw ConfigError("clip_len must be >= 1");
        if (steps < 0) throw ConfigError("steps must be >= 0");
        if (steps == 0 && !bypass_diffusion)
            throw ConfigError("steps=0 requires bypass_diffusion");
        if (prior_strength < 0.0 || prior_strength > 1.0)
            throw ConfigError("prior_strength must be in [0,1]");
        if (blur_sigma < 0.0) throw ConfigError("blur_sigma must be >= 0");
    }
};

struct InferenceTrace {
    struct ClipEvent {
        int step_index = 0;
        int timestep = 0;
        ClipSpan span;
        std::vector<int64_t> anchors;
    };
    TemporalPlan plan;
    std::vector<ClipEvent> clips;
};

namespace pipe_detail {

inline Tensor gather_frames(const Tensor& stack, const std::vector<int64_t>& idx) {
    int64_t per = stack.numel() / stack.dim(0);
    std::vector<int64_t> shape = stack.shape;
    shape[0] = static_cast<int64_t>(idx.size());
    Tensor out(shape);
    for (size_t i = 0; i < idx.size(); ++i)
        std::memcpy(out.ptr() + static_cast<int64_t>(i) * per, stack.ptr() + idx[i] * per,
                    static_cast<size_t>(per) * sizeof(double));
    return out;
}

inline Tensor slice_frame(const Tensor& stack, int64_t f) {
    return gather_frames(stack, {f});
}

inline void scatter_frames(Tensor& stack, const std::vector<int64_t>& idx, const Tensor& rows) {
    int64_t per = stack.numel() / stack.dim(0);
    for (size_t i = 0; i < idx.size(); ++i)
        std::memcpy(stack.ptr() + idx[i] * per, rows.ptr() + static_cast<int64_t>(i) * per,
                    static_cast<size_t>(per) * sizeof(double));
}

template <typename Fn>
auto stage(const char* name, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string(name) + ": " + e.what());
    }
}

// conditioned epsilon predictor over a frame stack treated as one clip
struct ClipModel {
    Model& model;
    const NoiseSchedule& schedule;
    Tensor masked_lat;  // [f,4,hl,wl], rows aligned with the latents passed in
    Tensor mask_small;  // [f,1,hl,wl]

    Tensor operator()(const Tensor& noisy, int t) const {
        ConditioningLatent cond = assemble_condition(LatentVideo{masked_lat}, mask_small,
                                                     LatentVideo{noisy});
        return predict_epsilon(noisy, cond.data, t, schedule.abar(t), model.net);
    }
};

// same conditioning, but every frame is denoised independently (f=1 clips)
struct PerFrameModel {
    Model& model;
    const NoiseSchedule& schedule;
    const Tensor& masked_lat;
    const Tensor& mask_small;

    Tensor operator()(const Tensor& noisy, int t) const {
        Tensor out(noisy.shape);
        int64_t f = noisy.dim(0);
        for (int64_t fi = 0; fi < f; ++fi) {
            ClipModel one{model, schedule, gather_frames(masked_lat, {fi}),
                          gather_frames(mask_small, {fi})};
            Tensor eps = one(slice_frame(noisy, fi), t);
            scatter_frames(out, {fi}, eps);
        }
        return out;
    }
};

}  // namespace pipe_detail

// Overwrites anchor-frame latents with their pre-inference values before a
// denoiser call. `anchor_rows` maps a frame index to its row in `anchor_latents`.
inline Tensor apply_anchors(Tensor latents, const std::vector<int64_t>& anchors,
                            const std::map<int64_t, int64_t>& anchor_rows,
                            const Tensor& anchor_latents) {
    for (int64_t f : anchors) {
        auto it = anchor_rows.find(f);
        if (it == anchor_rows.end())
            throw std::runtime_error("apply_anchors: missing anchor latent for frame " +
                                     std::to_string(f));
        pipe_detail::scatter_frames(
            latents, {f}, pipe_detail::gather_frames(anchor_latents, {it->second}));
    }
    return latents;
}

// One epsilon prediction + one DDIM move for a whole clip; temporal attention
// spans the clip.
inline Tensor denoise_clip(const Tensor& clip_latents, int t, int t_to,
                           const Tensor& clip_masked_lat, const Tensor& clip_mask_small,
                           Model& model, const NoiseSchedule& schedule, int clip_len) {
    if (clip_latents.dim(0) > clip_len)
        throw std::invalid_argument("denoise_clip: clip longer than clip_len");
    pipe_detail::ClipModel cm{model, schedule, clip_masked_lat, clip_mask_small};
    Tensor eps = cm(clip_latents, t);
    return detail::ddim_update(clip_latents, eps, schedule.abar(t), schedule.abar(t_to));
}

// Full pipeline: prior -> inversion -> pre-inference -> staggered main pass
// -> decode -> blend. Deterministic given (inputs, checkpoint, config, seed).
inline VideoFrames inpaint_video(const VideoFrames& frames, const MaskSequence& masks,
                                 Model& model, const InferenceConfig& cfg,
                                 InferenceTrace* trace = nullptr,
                                 const std::function<void(int, int)>& progress = {}) {
    cfg.validate();
    if (masks.frames() != frames.frames() || masks.height() != frames.height() ||
        masks.width() != frames.width())
        throw std::invalid_argument("inpaint_video: mask shape mismatch");
    int64_t n = frames.frames();

    // (1) prior; two-pass pre-propagation when an external prior is used
    PriorResult prior = pipe_detail::stage("prior", [&] {
        if (cfg.external_prior_cmd.empty()) return builtin_prior(frames, masks);
        std::vector<int64_t> idx = sample_preinference_frames(n, cfg.clip_len);
        if (static_cast<int64_t>(idx.size()) == n)
            return external_prior(cfg.external_prior_cmd, frames, masks, cfg.work_dir);
        VideoFrames sub = frames;
        sub.data = pipe_detail::gather_frames(frames.data, idx);
        MaskSequence submasks;
        submasks.data = pipe_detail::gather_frames(masks.data, idx);
        PriorResult pre = external_prior(cfg.external_prior_cmd, sub, submasks,
                                         cfg.work_dir.empty() ? "" : cfg.work_dir + "/pre");
        // hand the sampled-frame results back as known content for the full pass
        VideoFrames guided = frames;
        MaskSequence guided_masks = masks;
        pipe_detail::scatter_frames(guided.data, idx, pre.frames.data);
        int64_t plane = masks.height() * masks.width();
        for (int64_t f : idx)
            std::fill(guided_masks.data.ptr() + f * plane,
                      guided_masks.data.ptr() + (f + 1) * plane, 0.0);
        return external_prior(cfg.external_prior_cmd, guided, guided_masks, cfg.work_dir);
    });

    if (cfg.bypass_diffusion)
        return pipe_detail::stage("blend", [&] {
            return blend_output(prior.frames, frames, masks, cfg.blur_sigma);
        });

    if (model.codec.mode != CodecMode::Toy4)
        throw std::runtime_error(
            "inpaint: the lossless codec cannot drive the 9-channel conditioning branch");

    NoiseSchedule schedule = model.sched.make(cfg.steps);
    const std::vector<int>& ts = schedule.inference_timesteps;
    int K = schedule.n_steps();

    // conditioning inputs shared by every stage
    Tensor mask_small = pipe_detail::stage("encode", [&] { return downsample_mask(masks); });
    Tensor masked_lat = pipe_detail::stage("encode", [&] {
        return encode_masked(model.codec, frames.data, masks).data;
    });

    // (2) prior injection: per-frame DDIM inversion of the encoded prior
    Tensor z = pipe_detail::stage("prior-injection", [&] {
        pipe_detail::PerFrameModel pf{model, schedule, masked_lat, mask_small};
        return inject_prior(prior, model.codec, schedule, pf, cfg.prior_strength, cfg.seed).data;
    });

    // (3) pre-inference on the sampled clip; its inversion provides anchors
    std::vector<int64_t> pre_idx;
    std::map<int, Tensor> anchor_traj;  // timestep -> [k,4,hl,wl]
    std::map<int64_t, int64_t> anchor_rows;
    if (cfg.guidance_enabled) {
        pipe_detail::stage("pre-inference", [&] {
            pre_idx = sample_preinference_frames(n, cfg.clip_len);
            for (size_t i = 0; i < pre_idx.size(); ++i)
                anchor_rows[pre_idx[static_cast<size_t>(i)]] = static_cast<int64_t>(i);
            pipe_detail::ClipModel cm{model, schedule, pipe_detail::gather_frames(masked_lat, pre_idx),
                                      pipe_detail::gather_frames(mask_small, pre_idx)};
            Tensor zc = pipe_detail::gather_frames(z, pre_idx);
            Tensor denoised = ddim_sample(zc, cm, schedule, K);
            ddim_invert(denoised, cm, schedule, K, &anchor_traj);
            return 0;
        });
    }

    // (4) staggered main pass
    TemporalPlan plan = staggered_plan(n, cfg.clip_len, K);
    plan.preinference_indices = pre_idx;
    plan = anchor_plan(plan);
    if (trace) trace->plan = plan;

    pipe_detail::stage("denoise", [&] {
        for (int k = 0; k < K; ++k) {
            int t = ts[static_cast<size_t>(k)];
            int t_to = (k + 1 < K) ? ts[static_cast<size_t>(k + 1)] : (t > 0 ? 0 : -1);
            if (progress) progress(k, t);
            const auto& spans = plan.per_timestep[static_cast<size_t>(k)];
            const auto& anchors_per_clip = plan.anchor_map[static_cast<size_t>(k)];
            for (size_t ci = 0; ci < spans.size(); ++ci) {
                const ClipSpan& span = spans[ci];
                std::vector<int64_t> clip_frames;
                for (int64_t f = span.start; f < span.end; ++f) clip_frames.push_back(f);
                const std::vector<int64_t>& anchors = anchors_per_clip[ci];
                if (!anchors.empty() && anchor_traj.count(t))
                    z = apply_anchors(std::move(z), anchors, anchor_rows, anchor_traj.at(t));
                Tensor zc = pipe_detail::gather_frames(z, clip_frames);
                zc = denoise_clip(zc, t, t_to,
                                  pipe_detail::gather_frames(masked_lat, clip_frames),
                                  pipe_detail::gather_frames(mask_small, clip_frames), model,
                                  schedule, cfg.clip_len);
                pipe_detail::scatter_frames(z, clip_frames, zc);
                if (trace) trace->clips.push_back({k, t, span, anchors});
            }
        }
        return 0;
    });

    // (5) decode, (6) blend
    VideoFrames generated = pipe_detail::stage("decode", [&] {
        return model.codec.decode_video(LatentVideo{z}, frames);
    });
    return pipe_detail::stage("blend", [&] {
        return blend_output(generated, frames, masks, cfg.blur_sigma);
    });
}

}  // namespace diffueraser

#endif
