#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "diffueraser/latent_codec.hpp"
#include "diffueraser/rng.hpp"
#include "helpers.hpp"

using namespace diffueraser;

namespace {

LatentCodec make_codec(CodecMode mode, uint64_t seed = 1) {
    LatentCodec c;
    c.mode = mode;
    c.params = init_codec(32, seed);
    return c;
}

Tensor gather_frame_order(const Tensor& x, const std::vector<int64_t>& order) {
    Tensor out(x.shape);
    int64_t per = x.numel() / x.dim(0);
    for (size_t i = 0; i < order.size(); ++i)
        std::memcpy(out.ptr() + static_cast<int64_t>(i) * per, x.ptr() + order[i] * per,
                    static_cast<size_t>(per) * sizeof(double));
    return out;
}

}  // namespace

TEST_CASE("encode maps 64x64 to 16x16 latents") {
    for (CodecMode mode : {CodecMode::Toy4, CodecMode::Lossless48}) {
        LatentCodec codec = make_codec(mode);
        Tensor frames = Rng(2).uniform_tensor({3, 3, 64, 64});
        LatentVideo z = codec.encode(frames);
        CHECK(z.data.dim(0) == 3);
        CHECK(z.data.dim(1) == codec.latent_channels());
        CHECK(z.data.dim(2) == 16);
        CHECK(z.data.dim(3) == 16);
    }
}

TEST_CASE("lossless round trip: random arrays within 1e-6") {
    LatentCodec codec = make_codec(CodecMode::Lossless48);
    Tensor frames = Rng(3).uniform_tensor({2, 3, 32, 32});
    Tensor rec = codec.decode(codec.encode(frames));
    CHECK(max_abs_diff(rec, frames) <= 1e-6);
}

TEST_CASE("lossless round trip: constant 0.5 frame is exact at float64") {
    LatentCodec codec = make_codec(CodecMode::Lossless48);
    Tensor frames = Tensor::full({1, 3, 16, 16}, 0.5);
    Tensor rec = codec.decode(codec.encode(frames));
    CHECK(max_abs_diff(rec, frames) == 0.0);
}

TEST_CASE("lossless mixing is orthogonal: energy preserved") {
    LatentCodec codec = make_codec(CodecMode::Lossless48);
    Tensor frames = Rng(4).gaussian_tensor({1, 3, 16, 16});
    LatentVideo z = codec.encode(frames);
    double in_sq = 0.0, out_sq = 0.0;
    for (int64_t i = 0; i < frames.numel(); ++i) in_sq += frames[i] * frames[i];
    for (int64_t i = 0; i < z.data.numel(); ++i) out_sq += z.data[i] * z.data[i];
    CHECK(std::abs(in_sq - out_sq) <= 1e-9 * in_sq);
}

TEST_CASE("codec is per-frame: frame shuffling commutes with encode") {
    for (CodecMode mode : {CodecMode::Toy4, CodecMode::Lossless48}) {
        LatentCodec codec = make_codec(mode, 7);
        Tensor frames = Rng(5).uniform_tensor({4, 3, 16, 16});
        std::vector<int64_t> order = {2, 0, 3, 1};
        Tensor shuffled = gather_frame_order(frames, order);
        Tensor a = codec.encode(shuffled).data;
        Tensor b = gather_frame_order(codec.encode(frames).data, order);
        CHECK(bitwise_equal(a, b));
    }
}

TEST_CASE("encode/decode errors") {
    LatentCodec codec = make_codec(CodecMode::Toy4);
    Tensor bad = Rng(6).uniform_tensor({1, 3, 10, 10});
    CHECK_THROWS_WITH_AS(codec.encode(bad), doctest::Contains("divisible"),
                         std::invalid_argument);
    LatentVideo wrong;
    wrong.data = Tensor({1, 48, 4, 4});
    CHECK_THROWS_WITH_AS(codec.decode(wrong), doctest::Contains("channels"),
                         std::invalid_argument);
}

TEST_CASE("toy codec decode clips to [0,1]") {
    LatentCodec codec = make_codec(CodecMode::Toy4);
    LatentVideo z;
    z.data = Rng(7).gaussian_tensor({1, 4, 4, 4}, 10.0);
    Tensor rec = codec.decode(z);
    for (int64_t i = 0; i < rec.numel(); ++i) {
        CHECK(rec[i] >= 0.0);
        CHECK(rec[i] <= 1.0);
    }
}

TEST_CASE("downsample_mask: pooling cases") {
    MaskSequence all_ones;
    all_ones.data = Tensor::full({2, 1, 16, 16}, 1.0);
    Tensor pooled = downsample_mask(all_ones);
    CHECK(pooled.dim(2) == 4);
    for (int64_t i = 0; i < pooled.numel(); ++i) CHECK(pooled[i] == 1.0);

    // one aligned 4x4 block -> exactly one latent pixel
    MaskSequence block;
    block.data = Tensor({1, 1, 16, 16});
    for (int64_t y = 4; y < 8; ++y)
        for (int64_t x = 8; x < 12; ++x) block.data[y * 16 + x] = 1.0;
    Tensor pb = downsample_mask(block);
    double total = std::accumulate(pb.data.begin(), pb.data.end(), 0.0);
    CHECK(total == 1.0);
    CHECK(pb[1 * 4 + 2] == 1.0);

    // any single masked pixel -> exactly one latent pixel
    Rng rng(8);
    for (int trial = 0; trial < 10; ++trial) {
        MaskSequence single;
        single.data = Tensor({1, 1, 16, 16});
        single.data[rng.uniform_int(16 * 16)] = 1.0;
        Tensor ps = downsample_mask(single);
        CHECK(std::accumulate(ps.data.begin(), ps.data.end(), 0.0) == 1.0);
    }
}

TEST_CASE("downsample_mask is zero everywhere iff the mask is") {
    Rng rng(9);
    MaskSequence zero;
    zero.data = Tensor({3, 1, 16, 16});
    CHECK(max_abs(downsample_mask(zero)) == 0.0);
    for (int trial = 0; trial < 10; ++trial) {
        MaskSequence m;
        m.data = Tensor({2, 1, 16, 16});
        int64_t n = 1 + rng.uniform_int(5);
        for (int64_t i = 0; i < n; ++i) m.data[rng.uniform_int(m.data.numel())] = 1.0;
        CHECK(max_abs(downsample_mask(m)) == 1.0);
    }
}

TEST_CASE("assemble_condition: channel layout and checks") {
    Rng rng(10);
    LatentVideo masked{rng.gaussian_tensor({2, 4, 8, 8})};
    LatentVideo noisy{rng.gaussian_tensor({2, 4, 8, 8})};
    Tensor mask_small = rng.uniform_tensor({2, 1, 8, 8});
    ConditioningLatent cond = assemble_condition(masked, mask_small, noisy);
    CHECK(cond.data.dim(1) == 9);
    int64_t plane = 8 * 8;
    for (int64_t f = 0; f < 2; ++f) {
        for (int64_t c = 0; c < 4; ++c)
            for (int64_t p = 0; p < plane; ++p) {
                CHECK(cond.data[((f * 9 + c) * plane) + p] ==
                      masked.data[((f * 4 + c) * plane) + p]);
                CHECK(cond.data[((f * 9 + 5 + c) * plane) + p] ==
                      noisy.data[((f * 4 + c) * plane) + p]);
            }
        for (int64_t p = 0; p < plane; ++p)
            CHECK(cond.data[(f * 9 + 4) * plane + p] == mask_small[f * plane + p]);
    }

    // zero noisy -> last 4 channels zero
    LatentVideo zero_noisy{Tensor({2, 4, 8, 8})};
    ConditioningLatent cz = assemble_condition(masked, mask_small, zero_noisy);
    for (int64_t f = 0; f < 2; ++f)
        for (int64_t c = 5; c < 9; ++c)
            for (int64_t p = 0; p < plane; ++p) CHECK(cz.data[(f * 9 + c) * plane + p] == 0.0);

    // frame permutation commutes
    std::vector<int64_t> order = {1, 0};
    ConditioningLatent cp = assemble_condition(LatentVideo{gather_frame_order(masked.data, order)},
                                               gather_frame_order(mask_small, order),
                                               LatentVideo{gather_frame_order(noisy.data, order)});
    CHECK(bitwise_equal(cp.data, gather_frame_order(cond.data, order)));

    // lossless-width latents are rejected
    LatentVideo wide{Tensor({2, 48, 8, 8})};
    CHECK_THROWS_WITH_AS(assemble_condition(wide, mask_small, noisy),
                         doctest::Contains("lossless"), std::invalid_argument);
    LatentVideo off{rng.gaussian_tensor({2, 4, 8, 4})};
    CHECK_THROWS_AS(assemble_condition(masked, mask_small, off), std::invalid_argument);
}

TEST_CASE("encode_masked zeroes masked content before encoding") {
    LatentCodec codec = make_codec(CodecMode::Lossless48);
    Tensor frames = Rng(11).uniform_tensor({1, 3, 16, 16});
    MaskSequence m;
    m.data = Tensor::full({1, 1, 16, 16}, 1.0);
    LatentVideo z = encode_masked(codec, frames, m);
    Tensor rec = codec.decode(z);
    CHECK(max_abs(rec) <= 1e-12);
}
