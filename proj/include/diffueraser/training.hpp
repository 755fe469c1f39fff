#ifndef DIFFUERASER_TRAINING_HPP
#define DIFFUERASER_TRAINING_HPP

#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "latent_codec.hpp"
#include "network.hpp"
#include "pipeline.hpp"
#include "rng.hpp"
#include "schedule.hpp"
#include "tensor.hpp"
#include "video_io.hpp"

namespace diffueraser {

/*-------------------------------- mask synthesis --------------------------------*/

struct MaskGenConfig {
    double rate = 0.25;          // target area fraction in [0,1]
    double direction_deg = 0.0;  // drift direction of the mask across frames
    enum class Shape { Rectangle, Ellipse, Stroke } shape = Shape::Rectangle;
    uint64_t seed = 0;
    double speed = 1.5;   // pixels per frame along direction
    double jitter = 0.5;  // uniform per-frame positional noise, pixels
};

namespace maskgen_detail {

inline void paint_disc(std::vector<char>& m, int64_t h, int64_t w, double cy, double cx,
                       double r) {
    int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(cy - r)));
    int64_t y1 = std::min<int64_t>(h - 1, static_cast<int64_t>(std::ceil(cy + r)));
    int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(cx - r)));
    int64_t x1 = std::min<int64_t>(w - 1, static_cast<int64_t>(std::ceil(cx + r)));
    for (int64_t y = y0; y <= y1; ++y)
        for (int64_t x = x0; x <= x1; ++x) {
            double dy = y - cy, dx = x - cx;
            if (dy * dy + dx * dx <= r * r) m[static_cast<size_t>(y * w + x)] = 1;
        }
}

}  // namespace maskgen_detail

// Frame 0 carries a shape of roughly `rate` area; later frames translate it
// along `direction_deg` with per-frame jitter. No wraparound; pixels that
// drift off the border are dropped.
inline MaskSequence generate_mask_sequence(int64_t h, int64_t w, int64_t f,
                                           const MaskGenConfig& cfg) {
    if (cfg.rate < 0.0 || cfg.rate > 1.0)
        throw std::invalid_argument("generate_mask_sequence: rate must be in [0,1]");
    MaskSequence out;
    out.data = Tensor({f, 1, h, w});
    if (cfg.rate == 0.0) return out;
    if (cfg.rate == 1.0) {
        out.data.fill(1.0);
        return out;
    }
    Rng rng(cfg.seed);
    double target = cfg.rate * static_cast<double>(h * w);
    std::vector<char> base(static_cast<size_t>(h * w), 0);

    switch (cfg.shape) {
        case MaskGenConfig::Shape::Rectangle: {
            double aspect = rng.uniform(0.5, 2.0);
            int64_t mh = std::max<int64_t>(1, std::llround(std::sqrt(target * aspect)));
            mh = std::min(mh, h);
            int64_t mw = std::max<int64_t>(1, std::llround(target / static_cast<double>(mh)));
            mw = std::min(mw, w);
            int64_t y0 = rng.uniform_int(std::max<int64_t>(1, h - mh + 1));
            int64_t x0 = rng.uniform_int(std::max<int64_t>(1, w - mw + 1));
            for (int64_t y = y0; y < y0 + mh; ++y)
                for (int64_t x = x0; x < x0 + mw; ++x) base[static_cast<size_t>(y * w + x)] = 1;
            break;
        }
        case MaskGenConfig::Shape::Ellipse: {
            double ratio = rng.uniform(0.5, 2.0);
            double ra = std::sqrt(target * ratio / M_PI);
            double rb = target / (M_PI * ra);
            ra = std::min(ra, static_cast<double>(h) / 2.0);
            rb = std::min(rb, static_cast<double>(w) / 2.0);
            double cy = rng.uniform(ra, static_cast<double>(h) - ra);
            double cx = rng.uniform(rb, static_cast<double>(w) - rb);
            for (int64_t y = 0; y < h; ++y)
                for (int64_t x = 0; x < w; ++x) {
                    double dy = (y - cy) / ra, dx = (x - cx) / rb;
                    if (dy * dy + dx * dx <= 1.0) base[static_cast<size_t>(y * w + x)] = 1;
                }
            break;
        }
        case MaskGenConfig::Shape::Stroke: {
            double r = std::max(1.5, std::sqrt(target) / 4.0);
            double cy = rng.uniform(r, static_cast<double>(h) - r);
            double cx = rng.uniform(r, static_cast<double>(w) - r);
            double ang = rng.uniform(0.0, 2.0 * M_PI);
            int64_t painted = 0;
            int guard = 0;
            while (painted < static_cast<int64_t>(target) && guard++ < 10000) {
                maskgen_detail::paint_disc(base, h, w, cy, cx, r);
                ang += rng.uniform(-0.6, 0.6);
                cy += std::sin(ang) * r;
                cx += std::cos(ang) * r;
                cy = std::min(std::max(cy, 0.0), static_cast<double>(h - 1));
                cx = std::min(std::max(cx, 0.0), static_cast<double>(w - 1));
                painted = 0;
                for (char v : base) painted += v;
            }
            break;
        }
    }

    double dir = cfg.direction_deg * M_PI / 180.0;
    for (int64_t fi = 0; fi < f; ++fi) {
        double ox = std::cos(dir) * cfg.speed * static_cast<double>(fi) +
                    rng.uniform(-cfg.jitter, cfg.jitter);
        double oy = std::sin(dir) * cfg.speed * static_cast<double>(fi) +
                    rng.uniform(-cfg.jitter, cfg.jitter);
        int64_t sy = std::llround(fi == 0 ? 0.0 : oy);
        int64_t sx = std::llround(fi == 0 ? 0.0 : ox);
        double* dst = out.data.ptr() + fi * h * w;
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                int64_t yy = y - sy, xx = x - sx;
                if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                if (base[static_cast<size_t>(yy * w + xx)]) dst[y * w + x] = 1.0;
            }
    }
    return out;
}

/*------------------------------ synthetic corpus -------------------------------*/

// Smooth drifting scalar field through a fixed color map, plus moving soft
// sprites. Band-limited on purpose: the 4-channel codec and the denoiser both
// train against this family.
struct SyntheticVideoConfig {
    int64_t h = 32, w = 32, f = 8;
    uint64_t seed = 0;
    int waves = 3;
    int sprites = 2;
    double drift = 0.6;        // field motion, pixels per frame
    double min_wavelength = 12.0;
};

inline VideoFrames make_synthetic_video(const SyntheticVideoConfig& cfg) {
    Rng rng(cfg.seed);
    struct Wave {
        double fx, fy, phase, amp, speed;
    };
    std::vector<Wave> waves;
    for (int k = 0; k < cfg.waves; ++k) {
        double wavelength = rng.uniform(cfg.min_wavelength, cfg.min_wavelength * 3.0);
        double ang = rng.uniform(0.0, 2.0 * M_PI);
        waves.push_back({std::cos(ang) / wavelength, std::sin(ang) / wavelength,
                         rng.uniform(0.0, 2.0 * M_PI), rng.uniform(0.3, 0.7) / cfg.waves,
                         rng.uniform(-cfg.drift, cfg.drift)});
    }
    struct Sprite {
        double cy, cx, vy, vx, sigma, amp;
    };
    std::vector<Sprite> sprites;
    for (int k = 0; k < cfg.sprites; ++k)
        sprites.push_back({rng.uniform(0.2, 0.8) * cfg.h, rng.uniform(0.2, 0.8) * cfg.w,
                           rng.uniform(-cfg.drift, cfg.drift), rng.uniform(-cfg.drift, cfg.drift),
                           rng.uniform(3.0, 6.0), rng.uniform(-0.5, 0.5)});

    VideoFrames v;
    v.data = Tensor({cfg.f, 3, cfg.h, cfg.w});
    v.orig_h = cfg.h;
    v.orig_w = cfg.w;
    const double tint[3] = {0.35, 0.28, 0.20};
    for (int64_t t = 0; t < cfg.f; ++t)
        for (int64_t y = 0; y < cfg.h; ++y)
            for (int64_t x = 0; x < cfg.w; ++x) {
                double g = 0.0;
                for (const Wave& wv : waves)
                    g += wv.amp * std::sin(2.0 * M_PI *
                                               (wv.fx * (x + wv.speed * t) +
                                                wv.fy * (y + wv.speed * t)) +
                                           wv.phase);
                for (const Sprite& sp : sprites) {
                    double dy = y - (sp.cy + sp.vy * t), dx = x - (sp.cx + sp.vx * t);
                    g += sp.amp * std::exp(-(dy * dy + dx * dx) / (2.0 * sp.sigma * sp.sigma));
                }
                for (int64_t c = 0; c < 3; ++c) {
                    double val = 0.5 + tint[c] * g;
                    v.data[((t * 3 + c) * cfg.h + y) * cfg.w + x] =
                        std::min(1.0, std::max(0.0, val));
                }
            }
    return v;
}

/*--------------------------------- optimizer -----------------------------------*/

struct Adam {
    double lr = 1e-5;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int64_t t = 0;
    std::map<Param*, std::pair<Tensor, Tensor>> state;  // m, v

    void step(const std::vector<Param*>& trainable) {
        ++t;
        double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (Param* p : trainable) {
            if (!p->grad.same_shape(p->value)) continue;
            auto& [m, v] = state[p];
            if (!m.same_shape(p->value)) {
                m = Tensor(p->value.shape);
                v = Tensor(p->value.shape);
            }
            for (int64_t i = 0; i < p->value.numel(); ++i) {
                double g = p->grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                p->value[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
            }
        }
    }
};

/*-------------------------------- train config ---------------------------------*/

struct TrainConfig {
    int stage = 1;  // 1: spatial+branch+fusion (motion frozen); 2: motion only
    double lr = 1e-5;
    int batch_size = 4;
    int n_steps = 100;
    int clip_frames = 22;  // stage 2 clip length
    uint64_t seed = 0;

    void validate() const {
        if (stage != 1 && stage != 2) throw ConfigError("stage must be 1 or 2");
        if (lr <= 0.0) throw ConfigError("lr must be positive");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (n_steps < 0) throw ConfigError("n_steps must be >= 0");
        if (clip_frames < 1) throw ConfigError("clip_frames must be >= 1");
    }
};

inline std::vector<Param*> trainable_params(Model& m, int stage) {
    std::vector<Param*> out;
    m.net.visit([&](Param& p, ParamGroup g) {
        bool train = (stage == 2) ? (g == ParamGroup::Motion)
                                  : (g == ParamGroup::Spatial || g == ParamGroup::Branch ||
                                     g == ParamGroup::Fusion || g == ParamGroup::NullEmbedding);
        if (train) out.push_back(&p);
    });
    return out;
}

/*----------------------------------- batches ------------------------------------*/

struct TrainSample {
    Tensor noisy;   // [f,4,h/4,w/4]
    Tensor cond;    // [f,9,h/4,w/4]
    Tensor target;  // epsilon, [f,4,h/4,w/4]
    int t = 0;
};

// Samples t uniformly, draws epsilon, and assembles the conditioning input
// from the masked frames, the pooled mask, and the noisy latent. force_t >= 0
// pins the timestep (diagnostics).
inline TrainSample make_training_batch(const Tensor& frames, const MaskSequence& masks,
                                       Model& model, const NoiseSchedule& schedule, Rng& rng,
                                       int force_t = -1) {
    TrainSample s;
    s.t = force_t >= 0 ? force_t : static_cast<int>(rng.uniform_int(schedule.total_timesteps));
    LatentVideo x0 = model.codec.encode(frames);
    s.target = rng.gaussian_tensor(x0.data.shape);
    s.noisy = add_noise(x0.data, s.target, s.t, schedule);
    Tensor mask_small = downsample_mask(masks);
    LatentVideo masked = encode_masked(model.codec, frames, masks);
    s.cond = assemble_condition(masked, mask_small, LatentVideo{s.noisy}).data;
    return s;
}

/*---------------------------------- train step ----------------------------------*/

// One optimizer step over a batch of samples; only stage-appropriate groups
// move. Returns the batch loss.
inline double train_step(Model& model, const std::vector<TrainSample>& batch, Adam& opt,
                         int stage) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    std::vector<Param*> trainable = trainable_params(model, stage);
    model.net.visit([](Param& p, ParamGroup) { p.zero_grad(); });
    NoiseSchedule schedule = model.sched.make();

    double total = 0.0;
    double inv_b = 1.0 / static_cast<double>(batch.size());
    for (const TrainSample& s : batch) {
        Tape tape;
        std::vector<Value> feats =
            brushnet_forward_t(tape, tape.constant(s.cond), s.t, model.net);
        Value eps_pred = denoiser_forward_t(tape, tape.constant(s.noisy), s.t,
                                            schedule.abar(s.t), feats, model.net);
        Value loss = ops::mean_sq_diff(tape, eps_pred, s.target);
        total += tape.val(loss)[0];
        tape.backward(ops::scale(tape, loss, inv_b));
    }
    total *= inv_b;
    if (!std::isfinite(total))
        throw std::runtime_error("train_step: non-finite loss at optimizer step " +
                                 std::to_string(opt.t) + " (stage " + std::to_string(stage) +
                                 ", t=" + std::to_string(batch.front().t) + ")");
    opt.step(trainable);
    return total;
}

/*--------------------------------- codec pretrain -------------------------------*/

inline std::vector<Param*> codec_params(Model& m) {
    std::vector<Param*> out;
    m.codec.params.visit([&](Param& p, ParamGroup) { out.push_back(&p); });
    return out;
}

// Reconstruction pretraining of the 4-channel codec; returns the last loss.
inline double pretrain_codec(Model& model, const std::vector<VideoFrames>& corpus, int steps,
                             double lr, uint64_t seed, std::ostream* log = nullptr) {
    if (model.codec.mode != CodecMode::Toy4)
        throw std::invalid_argument("pretrain_codec: codec is not in toy4 mode");
    Rng rng(seed);
    Adam opt;
    opt.lr = lr;
    std::vector<Param*> params = codec_params(model);
    double loss_val = 0.0;
    for (int step = 0; step < steps; ++step) {
        const VideoFrames& v = corpus[static_cast<size_t>(
            rng.uniform_int(static_cast<int64_t>(corpus.size())))];
        int64_t fi = rng.uniform_int(v.frames());
        Tensor frame({1, 3, v.height(), v.width()});
        std::memcpy(frame.ptr(), v.data.ptr() + fi * 3 * v.height() * v.width(),
                    static_cast<size_t>(frame.numel()) * sizeof(double));
        for (Param* p : params) p->zero_grad();
        Tape tape;
        Value in = tape.constant(frame);
        Value lat = model.codec.encode_t(tape, in);
        Value rec = model.codec.decode_t(tape, lat, /*clip=*/false);
        Value loss = ops::mean_sq_diff(tape, rec, frame);
        loss_val = tape.val(loss)[0];
        tape.backward(loss);
        opt.step(params);
        if (log && (step % 50 == 0 || step + 1 == steps))
            (*log) << "codec step " << step << " loss " << loss_val << "\n";
    }
    return loss_val;
}

/*--------------------------------- training loop --------------------------------*/

struct TrainLogRow {
    int step;
    double loss;
    double lr;
};

// Two-stage training driver over an in-memory corpus. Masks are synthesized
// per step with randomized rate, direction, and shape.
inline std::vector<TrainLogRow> run_training(Model& model, const std::vector<VideoFrames>& corpus,
                                             const TrainConfig& cfg,
                                             const std::string& csv_log_path = "") {
    cfg.validate();
    if (corpus.empty()) throw std::invalid_argument("run_training: empty corpus");
    NoiseSchedule schedule = model.sched.make();
    Rng rng(cfg.seed);
    Adam opt;
    opt.lr = cfg.lr;
    std::vector<TrainLogRow> log;
    std::ofstream csv;
    if (!csv_log_path.empty()) {
        csv.open(csv_log_path);
        csv << "step,loss,lr\n";
    }
    for (int step = 0; step < cfg.n_steps; ++step) {
        std::vector<TrainSample> batch;
        if (cfg.stage == 1) {
            // per-frame samples: the motion module is frozen and unused
            for (int b = 0; b < cfg.batch_size; ++b) {
                const VideoFrames& v = corpus[static_cast<size_t>(
                    rng.uniform_int(static_cast<int64_t>(corpus.size())))];
                int64_t fi = rng.uniform_int(v.frames());
                Tensor frame({1, 3, v.height(), v.width()});
                std::memcpy(frame.ptr(), v.data.ptr() + fi * 3 * v.height() * v.width(),
                            static_cast<size_t>(frame.numel()) * sizeof(double));
                MaskGenConfig mg;
                mg.rate = rng.uniform(0.05, 0.5);
                mg.direction_deg = rng.uniform(0.0, 360.0);
                mg.shape = static_cast<MaskGenConfig::Shape>(rng.uniform_int(3));
                mg.seed = rng.next_u64();
                MaskSequence m = generate_mask_sequence(v.height(), v.width(), 1, mg);
                batch.push_back(make_training_batch(frame, m, model, schedule, rng));
            }
        } else {
            const VideoFrames& v = corpus[static_cast<size_t>(
                rng.uniform_int(static_cast<int64_t>(corpus.size())))];
            int64_t len = std::min<int64_t>(cfg.clip_frames, v.frames());
            int64_t start = rng.uniform_int(v.frames() - len + 1);
            Tensor clip({len, 3, v.height(), v.width()});
            std::memcpy(clip.ptr(), v.data.ptr() + start * 3 * v.height() * v.width(),
                        static_cast<size_t>(clip.numel()) * sizeof(double));
            MaskGenConfig mg;
            mg.rate = rng.uniform(0.05, 0.5);
            mg.direction_deg = rng.uniform(0.0, 360.0);
            mg.shape = static_cast<MaskGenConfig::Shape>(rng.uniform_int(3));
            mg.seed = rng.next_u64();
            MaskSequence m = generate_mask_sequence(v.height(), v.width(), len, mg);
            batch.push_back(make_training_batch(clip, m, model, schedule, rng));
        }
        double loss = train_step(model, batch, opt, cfg.stage);
        log.push_back({step, loss, cfg.lr});
        if (csv.is_open()) csv << step << "," << loss << "," << cfg.lr << "\n";
    }
    return log;
}

}  // namespace diffueraser

#endif
