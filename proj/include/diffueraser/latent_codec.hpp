#ifndef DIFFUERASER_LATENT_CODEC_HPP
#define DIFFUERASER_LATENT_CODEC_HPP

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "network.hpp"
#include "rng.hpp"
#include "tensor.hpp"
#include "video_io.hpp"

namespace diffueraser {

// 4x spatial downsampling codec. Toy4 is a small trained conv autoencoder to
// 4 channels; Lossless48 is space-to-depth with a per-color 4x4
// Walsh-Hadamard mixing (entries +-1/4), orthonormal and exactly invertible.
enum class CodecMode { Toy4, Lossless48 };

inline const char* codec_mode_name(CodecMode m) {
    return m == CodecMode::Toy4 ? "toy4" : "lossless48";
}

inline CodecMode codec_mode_from_name(const std::string& s) {
    if (s == "toy4") return CodecMode::Toy4;
    if (s == "lossless48") return CodecMode::Lossless48;
    throw std::invalid_argument("unknown codec mode: " + s);
}

struct LatentVideo {
    Tensor data;  // [f, c_lat, h/4, w/4]

    int64_t frames() const { return data.dim(0); }
    int64_t channels() const { return data.dim(1); }
};

struct ConditioningLatent {
    Tensor data;  // [f, 9, h/4, w/4]: masked-image latent (4) | mask (1) | noisy (4)
};

struct CodecParams {
    int hidden = 64;
    ConvP enc1, enc2, enc3, dec1, dec2, dec3;

    void visit(const DenoiserParams::Visitor& fn) {
        for (ConvP* c : {&enc1, &enc2, &enc3, &dec1, &dec2, &dec3}) {
            fn(c->w, ParamGroup::Codec);
            fn(c->b, ParamGroup::Codec);
        }
    }
};

inline CodecParams init_codec(int hidden, uint64_t seed) {
    CodecParams p;
    p.hidden = hidden;
    Rng rng(seed);
    init_detail::conv(p.enc1, "codec.enc1", hidden, 48, 3, rng);
    init_detail::conv(p.enc2, "codec.enc2", hidden, hidden, 3, rng);
    init_detail::conv(p.enc3, "codec.enc3", 4, hidden, 1, rng);
    init_detail::conv(p.dec1, "codec.dec1", hidden, 4, 3, rng);
    init_detail::conv(p.dec2, "codec.dec2", hidden, hidden, 3, rng);
    init_detail::conv(p.dec3, "codec.dec3", 48, hidden, 1, rng);
    return p;
}

namespace codec_detail {

// rows of the 4-point Walsh-Hadamard transform, scaled by 1/2 (orthonormal)
inline double h4(int u, int y) {
    static const int sign[4][4] = {
        {1, 1, 1, 1}, {1, -1, 1, -1}, {1, 1, -1, -1}, {1, -1, -1, 1}};
    return 0.5 * sign[u][y];
}

inline void check_divisible(int64_t h, int64_t w) {
    if (h % 4 != 0 || w % 4 != 0)
        throw std::invalid_argument("codec: spatial dims must be divisible by 4, got " +
                                    std::to_string(h) + "x" + std::to_string(w));
}

// [f,3,h,w] -> [f,48,h/4,w/4], channel = color*16 + dy*4 + dx
inline std::vector<int64_t> s2d_index(int64_t f, int64_t h, int64_t w) {
    int64_t hl = h / 4, wl = w / 4;
    std::vector<int64_t> idx(static_cast<size_t>(f * 48 * hl * wl));
    int64_t p = 0;
    for (int64_t fi = 0; fi < f; ++fi)
        for (int64_t c = 0; c < 3; ++c)
            for (int64_t dy = 0; dy < 4; ++dy)
                for (int64_t dx = 0; dx < 4; ++dx)
                    for (int64_t y = 0; y < hl; ++y)
                        for (int64_t x = 0; x < wl; ++x)
                            idx[static_cast<size_t>(p++)] =
                                ((fi * 3 + c) * h + (y * 4 + dy)) * w + (x * 4 + dx);
    return idx;
}

inline Value space_to_depth4(Tape& t, Value x) {
    const Tensor& xv = t.val(x);
    int64_t f = xv.dim(0), h = xv.dim(2), w = xv.dim(3);
    if (xv.dim(1) != 3) throw std::invalid_argument("space_to_depth4: expected 3 channels");
    check_divisible(h, w);
    return ops::detail::permute(t, x, {f, 48, h / 4, w / 4}, s2d_index(f, h, w));
}

inline Value depth_to_space4(Tape& t, Value x) {
    const Tensor& xv = t.val(x);
    int64_t hl = xv.dim(2), wl = xv.dim(3);
    if (xv.dim(1) != 48) throw std::invalid_argument("depth_to_space4: expected 48 channels");
    // inverse of s2d_index: dst pixel order, gather from packed layout
    int64_t h = hl * 4, w = wl * 4;
    std::vector<int64_t> idx(static_cast<size_t>(xv.numel()));
    int64_t p = 0;
    for (int64_t fi = 0; fi < xv.dim(0); ++fi)
        for (int64_t c = 0; c < 3; ++c)
            for (int64_t y = 0; y < h; ++y)
                for (int64_t x2 = 0; x2 < w; ++x2) {
                    int64_t ch = c * 16 + (y % 4) * 4 + (x2 % 4);
                    idx[static_cast<size_t>(p++)] =
                        ((fi * 48 + ch) * hl + y / 4) * wl + x2 / 4;
                }
    return ops::detail::permute(t, x, {xv.dim(0), 3, h, w}, std::move(idx));
}

}  // namespace codec_detail

struct LatentCodec {
    CodecMode mode = CodecMode::Toy4;
    CodecParams params;

    int latent_channels() const { return mode == CodecMode::Toy4 ? 4 : 48; }

    // tape-level paths, used by codec pretraining and wrapped below

    Value encode_t(Tape& t, Value frames) {
        const Tensor& xv = t.val(frames);
        codec_detail::check_divisible(xv.dim(2), xv.dim(3));
        if (mode == CodecMode::Lossless48) {
            Value packed = codec_detail::space_to_depth4(t, frames);
            return lossless_mix(t, packed, /*inverse=*/false);
        }
        Value h = codec_detail::space_to_depth4(t, frames);
        h = ops::conv2d(t, h, t.param(params.enc1.w), t.param(params.enc1.b), 1, 1);
        h = ops::silu(t, h);
        h = ops::conv2d(t, h, t.param(params.enc2.w), t.param(params.enc2.b), 1, 1);
        h = ops::silu(t, h);
        return ops::conv2d(t, h, t.param(params.enc3.w), t.param(params.enc3.b), 1, 0);
    }

    Value decode_t(Tape& t, Value latent, bool clip = true) {
        const Tensor& lv = t.val(latent);
        if (lv.dim(1) != latent_channels())
            throw std::invalid_argument("decode: latent has " + std::to_string(lv.dim(1)) +
                                        " channels, codec expects " +
                                        std::to_string(latent_channels()));
        Value pixels;
        if (mode == CodecMode::Lossless48) {
            Value mixed = lossless_mix(t, latent, /*inverse=*/true);
            pixels = codec_detail::depth_to_space4(t, mixed);
        } else {
            Value h = ops::conv2d(t, latent, t.param(params.dec1.w), t.param(params.dec1.b), 1, 1);
            h = ops::silu(t, h);
            h = ops::conv2d(t, h, t.param(params.dec2.w), t.param(params.dec2.b), 1, 1);
            h = ops::silu(t, h);
            h = ops::conv2d(t, h, t.param(params.dec3.w), t.param(params.dec3.b), 1, 0);
            pixels = codec_detail::depth_to_space4(t, h);
        }
        if (clip) {
            Tensor v = t.val(pixels);
            for (int64_t i = 0; i < v.numel(); ++i) v[i] = std::min(1.0, std::max(0.0, v[i]));
            return t.constant(std::move(v));
        }
        return pixels;
    }

    // per-frame deterministic mapping, [f,3,h,w] -> [f,c,h/4,w/4]
    LatentVideo encode(const Tensor& frames) {
        Tape t;
        return LatentVideo{t.val(encode_t(t, t.constant(frames)))};
    }

    LatentVideo encode(const VideoFrames& v) { return encode(v.data); }

    Tensor decode(const LatentVideo& latent) {
        Tape t;
        return t.val(decode_t(t, t.constant(latent.data)));
    }

    VideoFrames decode_video(const LatentVideo& latent, const VideoFrames& like) {
        VideoFrames out = like;
        out.data = decode(latent);
        return out;
    }

  private:
    // per-color 2D Walsh-Hadamard over the 16 packed positions of each block
    Value lossless_mix(Tape& t, Value packed, bool inverse) {
        const Tensor& xv = t.val(packed);
        int64_t f = xv.dim(0), hl = xv.dim(2), wl = xv.dim(3);
        Tensor out(xv.shape);
        int64_t plane = hl * wl;
        for (int64_t fi = 0; fi < f; ++fi)
            for (int64_t c = 0; c < 3; ++c) {
                const double* src = xv.ptr() + (fi * 48 + c * 16) * plane;
                double* dst = out.ptr() + (fi * 48 + c * 16) * plane;
                for (int64_t p = 0; p < plane; ++p)
                    for (int u = 0; u < 4; ++u)
                        for (int v = 0; v < 4; ++v) {
                            double acc = 0.0;
                            for (int y = 0; y < 4; ++y)
                                for (int x = 0; x < 4; ++x) {
                                    double k = inverse ? codec_detail::h4(y, u) *
                                                             codec_detail::h4(x, v)
                                                       : codec_detail::h4(u, y) *
                                                             codec_detail::h4(v, x);
                                    acc += k * src[(y * 4 + x) * plane + p];
                                }
                            dst[(u * 4 + v) * plane + p] = acc;
                        }
            }
        return t.constant(std::move(out));
    }
};

// 4x4 max-pool: a latent pixel is masked if any covered pixel is masked
inline Tensor downsample_mask(const MaskSequence& masks) {
    int64_t f = masks.frames(), h = masks.height(), w = masks.width();
    codec_detail::check_divisible(h, w);
    Tensor out({f, 1, h / 4, w / 4});
    for (int64_t fi = 0; fi < f; ++fi) {
        const double* src = masks.data.ptr() + fi * h * w;
        double* dst = out.ptr() + fi * (h / 4) * (w / 4);
        for (int64_t y = 0; y < h / 4; ++y)
            for (int64_t x = 0; x < w / 4; ++x) {
                double m = 0.0;
                for (int64_t dy = 0; dy < 4 && m == 0.0; ++dy)
                    for (int64_t dx = 0; dx < 4; ++dx)
                        if (src[(y * 4 + dy) * w + x * 4 + dx] != 0.0) {
                            m = 1.0;
                            break;
                        }
                dst[y * (w / 4) + x] = m;
            }
    }
    return out;
}

// channels concatenated as masked-image latent (4) | mask (1) | noisy (4)
inline ConditioningLatent assemble_condition(const LatentVideo& masked_latent,
                                             const Tensor& mask_small,
                                             const LatentVideo& noisy) {
    const Tensor& a = masked_latent.data;
    const Tensor& n = noisy.data;
    if (a.dim(1) != 4 || n.dim(1) != 4)
        throw std::invalid_argument(
            "assemble_condition: conditioning requires the 4-channel codec (lossless mode "
            "latents are rejected)");
    if (mask_small.dim(1) != 1)
        throw std::invalid_argument("assemble_condition: mask must have 1 channel");
    if (a.dim(0) != n.dim(0) || a.dim(0) != mask_small.dim(0) || a.dim(2) != n.dim(2) ||
        a.dim(3) != n.dim(3) || a.dim(2) != mask_small.dim(2) || a.dim(3) != mask_small.dim(3))
        throw std::invalid_argument("assemble_condition: dim mismatch");
    int64_t f = a.dim(0), hl = a.dim(2), wl = a.dim(3), plane = hl * wl;
    ConditioningLatent cond;
    cond.data = Tensor({f, 9, hl, wl});
    for (int64_t fi = 0; fi < f; ++fi) {
        std::memcpy(cond.data.ptr() + fi * 9 * plane, a.ptr() + fi * 4 * plane,
                    static_cast<size_t>(4 * plane) * sizeof(double));
        std::memcpy(cond.data.ptr() + (fi * 9 + 4) * plane, mask_small.ptr() + fi * plane,
                    static_cast<size_t>(plane) * sizeof(double));
        std::memcpy(cond.data.ptr() + (fi * 9 + 5) * plane, n.ptr() + fi * 4 * plane,
                    static_cast<size_t>(4 * plane) * sizeof(double));
    }
    return cond;
}

// masked-image latent: encode(frames * (1 - mask))
inline LatentVideo encode_masked(LatentCodec& codec, const Tensor& frames,
                                 const MaskSequence& masks) {
    int64_t f = frames.dim(0), h = frames.dim(2), w = frames.dim(3);
    Tensor masked = frames;
    for (int64_t fi = 0; fi < f; ++fi) {
        const double* mp = masks.data.ptr() + fi * h * w;
        for (int64_t c = 0; c < 3; ++c) {
            double* p = masked.ptr() + (fi * 3 + c) * h * w;
            for (int64_t i = 0; i < h * w; ++i) p[i] *= 1.0 - mp[i];
        }
    }
    return codec.encode(masked);
}

}  // namespace diffueraser

#endif
