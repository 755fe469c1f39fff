#ifndef DIFFUERASER_PRIOR_HPP
#define DIFFUERASER_PRIOR_HPP

#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "latent_codec.hpp"
#include "rng.hpp"
#include "schedule.hpp"
#include "tensor.hpp"
#include "video_io.hpp"

namespace diffueraser {

// A fully completed video from a lightweight inpainting pass: no hole left
// unfilled, unmasked pixels identical to the input.
struct PriorResult {
    VideoFrames frames;
    enum class Source { Builtin, External } source = Source::Builtin;
};

// Zero-motion propagation plus harmonic fill. Masked pixels known at the same
// location in another frame are copied from the temporally nearest such frame
// (earlier frame wins ties); pixels never seen anywhere are relaxed to the
// average of their neighbors until the update drops below 1e-4. The masked
// content of the input is ignored entirely, so the pass is idempotent.
inline PriorResult builtin_prior(const VideoFrames& input, const MaskSequence& masks) {
    if (masks.frames() != input.frames() || masks.height() != input.height() ||
        masks.width() != input.width())
        throw std::invalid_argument("builtin_prior: mask shape mismatch");
    int64_t f = input.frames(), h = input.height(), w = input.width();
    int64_t plane = h * w;
    PriorResult result;
    result.frames = input;
    result.source = PriorResult::Source::Builtin;
    Tensor& out = result.frames.data;

    // temporal propagation per pixel
    std::vector<char> never_known(static_cast<size_t>(plane), 0);
    std::vector<int64_t> known;
    for (int64_t p = 0; p < plane; ++p) {
        known.clear();
        for (int64_t fi = 0; fi < f; ++fi)
            if (masks.data[fi * plane + p] == 0.0) known.push_back(fi);
        if (known.empty()) {
            never_known[static_cast<size_t>(p)] = 1;
            continue;
        }
        for (int64_t fi = 0; fi < f; ++fi) {
            if (masks.data[fi * plane + p] == 0.0) continue;
            // nearest known frame, earlier on ties
            int64_t best = known[0];
            for (int64_t k : known) {
                int64_t dk = std::abs(k - fi), db = std::abs(best - fi);
                if (dk < db || (dk == db && k < best)) best = k;
            }
            for (int64_t c = 0; c < 3; ++c)
                out[(fi * 3 + c) * plane + p] = input.data[(best * 3 + c) * plane + p];
        }
    }

    // harmonic fill for pixels with no temporal source, per frame
    int64_t n_unknown = 0;
    for (char v : never_known) n_unknown += v;
    if (n_unknown > 0) {
        std::vector<double> cur(static_cast<size_t>(plane)), nxt(static_cast<size_t>(plane));
        for (int64_t fi = 0; fi < f; ++fi)
            for (int64_t c = 0; c < 3; ++c) {
                double* img = out.ptr() + (fi * 3 + c) * plane;
                // boundary = everything already known or temporally filled
                double mean = 0.0;
                int64_t cnt = 0;
                for (int64_t p = 0; p < plane; ++p)
                    if (!never_known[static_cast<size_t>(p)]) {
                        mean += img[p];
                        ++cnt;
                    }
                mean = cnt > 0 ? mean / static_cast<double>(cnt) : 0.5;
                for (int64_t p = 0; p < plane; ++p)
                    cur[static_cast<size_t>(p)] =
                        never_known[static_cast<size_t>(p)] ? mean : img[p];
                for (int iter = 0; iter < 10000; ++iter) {
                    double max_update = 0.0;
                    for (int64_t y = 0; y < h; ++y)
                        for (int64_t x = 0; x < w; ++x) {
                            int64_t p = y * w + x;
                            if (!never_known[static_cast<size_t>(p)]) {
                                nxt[static_cast<size_t>(p)] = cur[static_cast<size_t>(p)];
                                continue;
                            }
                            double acc = 0.0;
                            int64_t n = 0;
                            if (y > 0) { acc += cur[static_cast<size_t>(p - w)]; ++n; }
                            if (y + 1 < h) { acc += cur[static_cast<size_t>(p + w)]; ++n; }
                            if (x > 0) { acc += cur[static_cast<size_t>(p - 1)]; ++n; }
                            if (x + 1 < w) { acc += cur[static_cast<size_t>(p + 1)]; ++n; }
                            double v = acc / static_cast<double>(n);
                            max_update = std::max(max_update,
                                                  std::abs(v - cur[static_cast<size_t>(p)]));
                            nxt[static_cast<size_t>(p)] = v;
                        }
                    std::swap(cur, nxt);
                    if (max_update < 1e-4) break;
                }
                for (int64_t p = 0; p < plane; ++p)
                    if (never_known[static_cast<size_t>(p)]) img[p] = cur[static_cast<size_t>(p)];
            }
    }
    return result;
}

// Runs `<command> --frames <dir> --masks <dir> --out <dir>` over the
// frame-directory format and validates the result before accepting it.
inline PriorResult external_prior(const std::string& command, const VideoFrames& input,
                                  const MaskSequence& masks,
                                  const std::string& work_dir = "") {
    namespace fs = std::filesystem;
    fs::path base = work_dir.empty()
                        ? fs::temp_directory_path() / ("diffueraser_prior_" +
                                                       std::to_string(::getpid()))
                        : fs::path(work_dir);
    fs::create_directories(base);
    std::string frames_dir = (base / "frames").string();
    std::string masks_dir = (base / "masks").string();
    std::string out_dir = (base / "out").string();
    // stale files from a previous exchange would change the frame count
    fs::remove_all(frames_dir);
    fs::remove_all(masks_dir);
    fs::remove_all(out_dir);
    save_frames(frames_dir, input);
    int64_t oh = input.orig_h > 0 ? input.orig_h : input.height();
    int64_t ow = input.orig_w > 0 ? input.orig_w : input.width();
    save_masks(masks_dir, masks, oh, ow);

    std::string cmd = command + " --frames '" + frames_dir + "' --masks '" + masks_dir +
                      "' --out '" + out_dir + "'";
    int rc = std::system(cmd.c_str());
    if (rc != 0)
        throw std::runtime_error("external prior failed (exit " + std::to_string(rc) +
                                 "): " + command);

    VideoFrames ext = load_frames(out_dir);
    if (ext.frames() != input.frames())
        throw std::runtime_error("external prior: frame count mismatch (hole left unfilled?)");
    if (ext.height() != input.height() || ext.width() != input.width())
        throw std::runtime_error("external prior: frame size mismatch");
    // unmasked pixels must survive the round trip within quantization
    int64_t plane = input.height() * input.width();
    for (int64_t fi = 0; fi < input.frames(); ++fi)
        for (int64_t p = 0; p < plane; ++p) {
            if (masks.data[fi * plane + p] != 0.0) continue;
            for (int64_t c = 0; c < 3; ++c) {
                double d = std::abs(ext.data[(fi * 3 + c) * plane + p] -
                                    input.data[(fi * 3 + c) * plane + p]);
                if (d > 1.0 / 255.0 + 1e-9)
                    throw std::runtime_error(
                        "external prior tampered with unmasked content at frame " +
                        std::to_string(fi));
            }
        }
    ext.fps = input.fps;
    ext.orig_h = input.orig_h;
    ext.orig_w = input.orig_w;
    PriorResult result;
    result.frames = std::move(ext);
    result.source = PriorResult::Source::External;
    return result;
}

// strength * ddim_invert(encode(prior)) + (1-strength) * seeded gaussian,
// evaluated at the largest inference timestep
inline LatentVideo inject_prior(const PriorResult& prior, LatentCodec& codec,
                                const NoiseSchedule& schedule, const EpsModel& model,
                                double strength, uint64_t seed, int invert_steps = 0) {
    if (strength < 0.0 || strength > 1.0)
        throw std::invalid_argument("inject_prior: strength must be in [0,1]");
    if (invert_steps <= 0) invert_steps = schedule.n_steps();
    LatentVideo z0 = codec.encode(prior.frames);
    Tensor z = Tensor(z0.data.shape);
    if (strength > 0.0) z = ddim_invert(z0.data, model, schedule, invert_steps);
    Rng rng(seed);
    Tensor noise = rng.gaussian_tensor(z0.data.shape);
    LatentVideo out;
    out.data = Tensor(z0.data.shape);
    for (int64_t i = 0; i < out.data.numel(); ++i)
        out.data[i] = strength * z[i] + (1.0 - strength) * noise[i];
    return out;
}

}  // namespace diffueraser

#endif
