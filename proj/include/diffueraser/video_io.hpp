#ifndef DIFFUERASER_VIDEO_IO_HPP
#define DIFFUERASER_VIDEO_IO_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "image_png.hpp"
#include "tensor.hpp"

namespace diffueraser {

// Pixel-space video, values in [0,1], layout [f,3,h,w]. Frames are
// reflect-padded at ingestion so h,w are >=16 and divisible by 8; the
// pre-padding size is kept for the final crop.
struct VideoFrames {
    Tensor data;
    double fps = -1.0;  // <0 = unset
    int64_t orig_h = 0, orig_w = 0;

    int64_t frames() const { return data.dim(0); }
    int64_t height() const { return data.dim(2); }
    int64_t width() const { return data.dim(3); }
};

// Binary masks aligned to a VideoFrames stack; 1 = masked (to be completed)
struct MaskSequence {
    Tensor data;  // [f,1,h,w], values exactly 0 or 1

    int64_t frames() const { return data.dim(0); }
    int64_t height() const { return data.dim(2); }
    int64_t width() const { return data.dim(3); }

    double coverage(int64_t f) const {
        int64_t hw = height() * width();
        double s = 0.0;
        const double* p = data.ptr() + f * hw;
        for (int64_t i = 0; i < hw; ++i) s += p[i];
        return s / static_cast<double>(hw);
    }
};

namespace detail {

inline int64_t padded_dim(int64_t d) {
    int64_t p = ((d + 7) / 8) * 8;
    return std::max<int64_t>(p, 16);
}

// reflect index into [0, n) without repeating the edge sample
inline int64_t reflect(int64_t i, int64_t n) {
    if (n == 1) return 0;
    int64_t period = 2 * (n - 1);
    i = ((i % period) + period) % period;
    return i < n ? i : period - i;
}

inline std::vector<std::filesystem::path> list_pngs(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir);
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        auto ext = e.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
        if (ext == ".png") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
    return files;
}

// pad [c,h,w] planes of one frame into [c,ph,pw] at fixed frame slot
inline void copy_padded_plane(const Image8& img, int channel, int src_channels, double* dst,
                              int64_t ph, int64_t pw) {
    for (int64_t y = 0; y < ph; ++y) {
        int64_t sy = reflect(y, img.h);
        for (int64_t x = 0; x < pw; ++x) {
            int64_t sx = reflect(x, img.w);
            uint8_t v = img.pixels[(static_cast<size_t>(sy) * img.w + sx) * src_channels +
                                   std::min<int64_t>(channel, src_channels - 1)];
            dst[y * pw + x] = static_cast<double>(v) / 255.0;
        }
    }
}

}  // namespace detail

inline VideoFrames load_frames(const std::string& dir) {
    auto files = detail::list_pngs(dir);
    if (files.empty()) throw std::runtime_error("no frames in " + dir);
    Image8 first = read_png(files[0].string());
    int64_t f = static_cast<int64_t>(files.size());
    int64_t ph = detail::padded_dim(first.h), pw = detail::padded_dim(first.w);
    VideoFrames v;
    v.orig_h = first.h;
    v.orig_w = first.w;
    v.data = Tensor({f, 3, ph, pw});
    for (int64_t i = 0; i < f; ++i) {
        Image8 img = (i == 0) ? std::move(first) : read_png(files[static_cast<size_t>(i)].string());
        if (img.h != v.orig_h || img.w != v.orig_w)
            throw std::runtime_error("inconsistent image sizes in " + dir + " at " +
                                     files[static_cast<size_t>(i)].filename().string());
        for (int c = 0; c < 3; ++c)
            detail::copy_padded_plane(img, c, static_cast<int>(img.channels),
                                      v.data.ptr() + (i * 3 + c) * ph * pw, ph, pw);
    }
    // sidecar metadata, optional
    std::ifstream meta(dir + "/metadata.json");
    if (meta.good()) {
        nlohmann::json j = nlohmann::json::parse(meta, nullptr, false);
        if (!j.is_discarded() && j.contains("fps")) v.fps = j["fps"].get<double>();
    }
    return v;
}

inline MaskSequence load_masks(const std::string& dir, int64_t expected_frames) {
    auto files = detail::list_pngs(dir);
    if (files.empty()) throw std::runtime_error("no masks in " + dir);
    if (static_cast<int64_t>(files.size()) != expected_frames && files.size() != 1)
        throw std::runtime_error("mask count mismatch: got " + std::to_string(files.size()) +
                                 ", expected " + std::to_string(expected_frames) + " or 1");
    Image8 first = read_png(files[0].string());
    int64_t oh = first.h, ow = first.w;
    int64_t ph = detail::padded_dim(oh), pw = detail::padded_dim(ow);
    MaskSequence m;
    m.data = Tensor({expected_frames, 1, ph, pw});
    for (int64_t i = 0; i < expected_frames; ++i) {
        if (files.size() == 1 && i > 0) {
            std::memcpy(m.data.ptr() + i * ph * pw, m.data.ptr(),
                        static_cast<size_t>(ph * pw) * sizeof(double));
            continue;
        }
        Image8 img = (i == 0) ? std::move(first) : read_png(files[static_cast<size_t>(i)].string());
        if (img.h != oh || img.w != ow)
            throw std::runtime_error("inconsistent mask sizes in " + dir);
        // average channels to gray, binarize at 0.5
        for (int64_t y = 0; y < ph; ++y) {
            int64_t sy = detail::reflect(y, img.h);
            for (int64_t x = 0; x < pw; ++x) {
                int64_t sx = detail::reflect(x, img.w);
                double g = 0.0;
                for (int64_t c = 0; c < img.channels; ++c)
                    g += img.pixels[(static_cast<size_t>(sy) * img.w + sx) * img.channels + c];
                g /= 255.0 * static_cast<double>(img.channels);
                m.data[i * ph * pw + y * pw + x] = (g >= 0.5) ? 1.0 : 0.0;
            }
        }
    }
    return m;
}

inline void save_frames(const std::string& dir, const VideoFrames& v) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    int64_t f = v.frames(), h = v.height(), w = v.width();
    int64_t oh = v.orig_h > 0 ? v.orig_h : h;
    int64_t ow = v.orig_w > 0 ? v.orig_w : w;
    Image8 img;
    img.h = oh;
    img.w = ow;
    img.channels = 3;
    img.pixels.resize(static_cast<size_t>(oh * ow * 3));
    char name[32];
    for (int64_t i = 0; i < f; ++i) {
        for (int64_t y = 0; y < oh; ++y)
            for (int64_t x = 0; x < ow; ++x)
                for (int64_t c = 0; c < 3; ++c) {
                    double val = v.data[((i * 3 + c) * h + y) * w + x];
                    val = std::min(1.0, std::max(0.0, val));
                    img.pixels[(static_cast<size_t>(y) * ow + x) * 3 + c] =
                        static_cast<uint8_t>(std::lround(val * 255.0));
                }
        std::snprintf(name, sizeof(name), "/frame_%05d.png", static_cast<int>(i));
        write_png(dir + name, img);
    }
    nlohmann::json meta;
    if (v.fps > 0) meta["fps"] = v.fps;
    meta["orig_h"] = oh;
    meta["orig_w"] = ow;
    std::ofstream(dir + "/metadata.json") << meta.dump(2) << "\n";
}

// crop_h/crop_w trim back to a pre-padding size; 0 keeps the stored size
inline void save_masks(const std::string& dir, const MaskSequence& m, int64_t crop_h = 0,
                       int64_t crop_w = 0) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    int64_t f = m.frames(), h = m.height(), w = m.width();
    int64_t oh = crop_h > 0 ? crop_h : h;
    int64_t ow = crop_w > 0 ? crop_w : w;
    Image8 img;
    img.h = oh;
    img.w = ow;
    img.channels = 1;
    img.pixels.resize(static_cast<size_t>(oh * ow));
    char name[32];
    for (int64_t i = 0; i < f; ++i) {
        for (int64_t y = 0; y < oh; ++y)
            for (int64_t x = 0; x < ow; ++x)
                img.pixels[static_cast<size_t>(y * ow + x)] =
                    m.data[(i * h + y) * w + x] >= 0.5 ? 255 : 0;
        std::snprintf(name, sizeof(name), "/frame_%05d.png", static_cast<int>(i));
        write_png(dir + name, img);
    }
}

// separable gaussian blur of one [h,w] plane; truncated at 3 sigma, kernel
// renormalized at borders so an all-ones plane stays all ones
inline void gaussian_blur_plane(const double* src, double* dst, int64_t h, int64_t w,
                                double sigma, std::vector<double>& tmp) {
    if (sigma <= 0.0) {
        std::memcpy(dst, src, static_cast<size_t>(h * w) * sizeof(double));
        return;
    }
    int64_t radius = static_cast<int64_t>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
    for (int64_t i = -radius; i <= radius; ++i)
        kernel[static_cast<size_t>(i + radius)] =
            std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    tmp.resize(static_cast<size_t>(h * w));
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            double acc = 0.0, norm = 0.0;
            for (int64_t i = -radius; i <= radius; ++i) {
                int64_t xx = x + i;
                if (xx < 0 || xx >= w) continue;
                double k = kernel[static_cast<size_t>(i + radius)];
                acc += k * src[y * w + xx];
                norm += k;
            }
            tmp[static_cast<size_t>(y * w + x)] = acc / norm;
        }
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            double acc = 0.0, norm = 0.0;
            for (int64_t i = -radius; i <= radius; ++i) {
                int64_t yy = y + i;
                if (yy < 0 || yy >= h) continue;
                double k = kernel[static_cast<size_t>(i + radius)];
                acc += k * tmp[static_cast<size_t>(yy * w + x)];
                norm += k;
            }
            dst[y * w + x] = acc / norm;
        }
}

// out = m_eff*generated + (1-m_eff)*input with m_eff = blur(mask)*mask.
// Gating by the binary mask keeps unmasked pixels bit-for-bit; the blur only
// softens the transition on the masked side of the boundary.
inline VideoFrames blend_output(const VideoFrames& generated, const VideoFrames& input,
                                const MaskSequence& masks, double blur_sigma) {
    check_same_shape(generated.data, input.data, "blend_output");
    if (masks.frames() != input.frames() || masks.height() != input.height() ||
        masks.width() != input.width())
        throw std::invalid_argument("blend_output: mask shape mismatch");
    int64_t f = input.frames(), h = input.height(), w = input.width();
    VideoFrames out = input;
    std::vector<double> blurred(static_cast<size_t>(h * w)), tmp;
    for (int64_t i = 0; i < f; ++i) {
        const double* mp = masks.data.ptr() + i * h * w;
        gaussian_blur_plane(mp, blurred.data(), h, w, blur_sigma, tmp);
        for (int64_t p = 0; p < h * w; ++p) {
            double m = blurred[static_cast<size_t>(p)] * mp[p];
            if (m == 0.0) continue;  // keep input bits untouched
            for (int64_t c = 0; c < 3; ++c) {
                int64_t idx = ((i * 3 + c) * h) * w + p;
                double v = m * generated.data[idx] + (1.0 - m) * input.data[idx];
                out.data[idx] = std::min(1.0, std::max(0.0, v));
            }
        }
    }
    return out;
}

}  // namespace diffueraser

#endif
