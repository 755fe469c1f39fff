#ifndef DIFFUERASER_METRICS_HPP
#define DIFFUERASER_METRICS_HPP

#include <cmath>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "tensor.hpp"
#include "video_io.hpp"

namespace diffueraser {

// PSNR over masked pixels plus a temporal-stability score (mean absolute
// inter-frame difference inside the union of consecutive masks).
struct EvalReport {
    std::vector<double> psnr_per_frame;  // dB, capped at 99
    double psnr_mean = 0.0;
    double temporal_stability = 0.0;
    double runtime_seconds = 0.0;

    nlohmann::json to_json() const {
        return {{"psnr_in_mask", {{"per_frame", psnr_per_frame}, {"mean", psnr_mean}}},
                {"temporal_stability", temporal_stability},
                {"runtime_seconds", runtime_seconds}};
    }
};

inline double mse_to_psnr(double mse) {
    if (mse <= 0.0) return 99.0;
    return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

inline EvalReport compute_metrics(const VideoFrames& output, const VideoFrames& ground_truth,
                                  const MaskSequence& masks) {
    check_same_shape(output.data, ground_truth.data, "compute_metrics");
    if (masks.frames() != output.frames() || masks.height() != output.height() ||
        masks.width() != output.width())
        throw std::invalid_argument("compute_metrics: mask shape mismatch");
    int64_t f = output.frames(), h = output.height(), w = output.width();
    int64_t plane = h * w;
    EvalReport r;
    double psnr_sum = 0.0;
    int64_t psnr_count = 0;
    for (int64_t fi = 0; fi < f; ++fi) {
        const double* mp = masks.data.ptr() + fi * plane;
        double se = 0.0;
        int64_t count = 0;
        for (int64_t p = 0; p < plane; ++p) {
            if (mp[p] == 0.0) continue;
            for (int64_t c = 0; c < 3; ++c) {
                double d = output.data[(fi * 3 + c) * plane + p] -
                           ground_truth.data[(fi * 3 + c) * plane + p];
                se += d * d;
            }
            count += 3;
        }
        double psnr = count > 0 ? mse_to_psnr(se / static_cast<double>(count)) : 99.0;
        r.psnr_per_frame.push_back(psnr);
        if (count > 0) {
            psnr_sum += psnr;
            ++psnr_count;
        }
    }
    r.psnr_mean = psnr_count > 0 ? psnr_sum / static_cast<double>(psnr_count) : 99.0;

    double stab_sum = 0.0;
    int64_t stab_frames = 0;
    for (int64_t fi = 1; fi < f; ++fi) {
        const double* m0 = masks.data.ptr() + (fi - 1) * plane;
        const double* m1 = masks.data.ptr() + fi * plane;
        double acc = 0.0;
        int64_t count = 0;
        for (int64_t p = 0; p < plane; ++p) {
            if (m0[p] == 0.0 && m1[p] == 0.0) continue;
            for (int64_t c = 0; c < 3; ++c)
                acc += std::abs(output.data[(fi * 3 + c) * plane + p] -
                                output.data[((fi - 1) * 3 + c) * plane + p]);
            count += 3;
        }
        if (count > 0) {
            stab_sum += acc / static_cast<double>(count);
            ++stab_frames;
        }
    }
    r.temporal_stability = stab_frames > 0 ? stab_sum / static_cast<double>(stab_frames) : 0.0;
    return r;
}

}  // namespace diffueraser

#endif
