#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "diffueraser/rng.hpp"
#include "diffueraser/video_io.hpp"
#include "helpers.hpp"

using namespace diffueraser;
using testutil::TempDir;

namespace {

VideoFrames random_video(int64_t f, int64_t h, int64_t w, uint64_t seed) {
    VideoFrames v;
    v.data = Rng(seed).uniform_tensor({f, 3, h, w});
    v.orig_h = h;
    v.orig_w = w;
    return v;
}

void write_gray_png(const std::string& path, int64_t h, int64_t w, uint8_t value) {
    Image8 img;
    img.h = h;
    img.w = w;
    img.channels = 1;
    img.pixels.assign(static_cast<size_t>(h * w), value);
    write_png(path, img);
}

}  // namespace

TEST_CASE("load_frames: 3 images 64x64") {
    TempDir dir("frames");
    VideoFrames v = random_video(3, 64, 64, 1);
    save_frames(dir.str(), v);
    VideoFrames loaded = load_frames(dir.str());
    CHECK(loaded.frames() == 3);
    CHECK(loaded.height() == 64);
    CHECK(loaded.width() == 64);
    CHECK(loaded.orig_h == 64);
    CHECK(loaded.orig_w == 64);
}

TEST_CASE("load_frames: 60x60 padded to 64x64 with crop recorded") {
    TempDir dir("frames_pad");
    VideoFrames v = random_video(2, 60, 60, 2);
    save_frames(dir.str(), v);
    VideoFrames loaded = load_frames(dir.str());
    CHECK(loaded.height() == 64);
    CHECK(loaded.width() == 64);
    CHECK(loaded.orig_h == 60);
    CHECK(loaded.orig_w == 60);
}

TEST_CASE("load_frames: small images padded up to 16") {
    TempDir dir("frames_tiny");
    VideoFrames v = random_video(1, 8, 8, 3);
    save_frames(dir.str(), v);
    VideoFrames loaded = load_frames(dir.str());
    CHECK(loaded.height() == 16);
    CHECK(loaded.width() == 16);
}

TEST_CASE("load_frames errors") {
    TempDir dir("frames_err");
    CHECK_THROWS_WITH_AS(load_frames(dir.str()), doctest::Contains("no frames"),
                         std::runtime_error);

    save_frames(dir.str(), random_video(1, 32, 32, 4));
    // second frame of a different size
    Image8 img;
    img.h = 48;
    img.w = 48;
    img.channels = 3;
    img.pixels.assign(48 * 48 * 3, 7);
    write_png(dir.sub("frame_99999.png"), img);
    CHECK_THROWS_WITH_AS(load_frames(dir.str()), doctest::Contains("inconsistent"),
                         std::runtime_error);
}

TEST_CASE("save/load round-trip within quantization") {
    TempDir dir("frames_rt");
    VideoFrames v = random_video(2, 32, 48, 6);
    save_frames(dir.str(), v);
    VideoFrames loaded = load_frames(dir.str());
    CHECK(max_abs_diff(loaded.data, v.data) <= 0.5 / 255.0 + 1e-12);
    // values quantize exactly on a second round trip
    TempDir dir2("frames_rt2");
    save_frames(dir2.str(), loaded);
    VideoFrames again = load_frames(dir2.str());
    CHECK(bitwise_equal(again.data, loaded.data));
}

TEST_CASE("load_masks: coverage cases") {
    TempDir dir("masks");
    write_gray_png(dir.sub("frame_00000.png"), 64, 64, 255);
    MaskSequence all_white = load_masks(dir.str(), 3);
    CHECK(all_white.frames() == 3);
    for (int64_t f = 0; f < 3; ++f) CHECK(all_white.coverage(f) == doctest::Approx(1.0));

    TempDir dir2("masks_black");
    write_gray_png(dir2.sub("frame_00000.png"), 64, 64, 0);
    MaskSequence all_black = load_masks(dir2.str(), 2);
    CHECK(all_black.coverage(0) == 0.0);

    // one 32x32 white quadrant in 64x64 -> coverage 0.25
    TempDir dir3("masks_quad");
    Image8 img;
    img.h = 64;
    img.w = 64;
    img.channels = 1;
    img.pixels.assign(64 * 64, 0);
    for (int64_t y = 0; y < 32; ++y)
        for (int64_t x = 0; x < 32; ++x) img.pixels[static_cast<size_t>(y * 64 + x)] = 255;
    write_png(dir3.sub("frame_00000.png"), img);
    MaskSequence quad = load_masks(dir3.str(), 1);
    double masked = 0;
    for (int64_t i = 0; i < quad.data.numel(); ++i) masked += quad.data[i];
    CHECK(masked / static_cast<double>(quad.data.numel()) == doctest::Approx(0.25));
}

TEST_CASE("load_masks: count mismatch") {
    TempDir dir("masks_cnt");
    write_gray_png(dir.sub("frame_00000.png"), 32, 32, 255);
    write_gray_png(dir.sub("frame_00001.png"), 32, 32, 255);
    CHECK_THROWS_WITH_AS(load_masks(dir.str(), 5), doctest::Contains("mismatch"),
                         std::runtime_error);
}

TEST_CASE("blend_output: zero mask is identity, full mask is generated") {
    VideoFrames input = random_video(2, 32, 32, 7);
    VideoFrames gen = random_video(2, 32, 32, 8);
    MaskSequence zero;
    zero.data = Tensor({2, 1, 32, 32});
    VideoFrames out = blend_output(gen, input, zero, 2.0);
    CHECK(bitwise_equal(out.data, input.data));

    MaskSequence one;
    one.data = Tensor::full({2, 1, 32, 32}, 1.0);
    VideoFrames out2 = blend_output(gen, input, one, 0.0);
    CHECK(bitwise_equal(out2.data, gen.data));
}

TEST_CASE("blend_output: half-plane mask, sigma=2, far pixels equal sources") {
    int64_t h = 64, w = 64;
    VideoFrames input = random_video(1, h, w, 9);
    VideoFrames gen = random_video(1, h, w, 10);
    MaskSequence m;
    m.data = Tensor({1, 1, h, w});
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = w / 2; x < w; ++x) m.data[y * w + x] = 1.0;
    double sigma = 2.0;
    VideoFrames out = blend_output(gen, input, m, sigma);
    int64_t margin = static_cast<int64_t>(std::ceil(4.0 * sigma));
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            int64_t dist = (x < w / 2) ? (w / 2 - x) : (x - w / 2 + 1);
            if (dist < margin) continue;
            for (int64_t c = 0; c < 3; ++c) {
                double expect = (x < w / 2) ? input.data[(c * h + y) * w + x]
                                            : gen.data[(c * h + y) * w + x];
                CHECK(std::abs(out.data[(c * h + y) * w + x] - expect) <= 1e-6);
            }
        }
}

TEST_CASE("blend_output: idempotent when generated == input") {
    VideoFrames input = random_video(2, 32, 32, 11);
    MaskSequence m;
    m.data = Tensor({2, 1, 32, 32});
    Rng rng(12);
    for (int64_t i = 0; i < m.data.numel(); ++i) m.data[i] = rng.uniform() < 0.3 ? 1.0 : 0.0;
    VideoFrames out = blend_output(input, input, m, 2.0);
    CHECK(max_abs_diff(out.data, input.data) <= 1e-12);
}

TEST_CASE("blend_output: unmasked pixels preserved bit-for-bit for random masks") {
    Rng rng(13);
    for (int trial = 0; trial < 5; ++trial) {
        VideoFrames input = random_video(2, 24, 24, 100 + trial);
        VideoFrames gen = random_video(2, 24, 24, 200 + trial);
        MaskSequence m;
        m.data = Tensor({2, 1, 24, 24});
        for (int64_t i = 0; i < m.data.numel(); ++i)
            m.data[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
        VideoFrames out = blend_output(gen, input, m, rng.uniform(0.0, 3.0));
        int64_t plane = 24 * 24;
        for (int64_t f = 0; f < 2; ++f)
            for (int64_t p = 0; p < plane; ++p) {
                if (m.data[f * plane + p] != 0.0) continue;
                for (int64_t c = 0; c < 3; ++c)
                    REQUIRE(out.data[(f * 3 + c) * plane + p] ==
                            input.data[(f * 3 + c) * plane + p]);
            }
    }
}

TEST_CASE("blend_output: shape mismatch") {
    VideoFrames a = random_video(2, 32, 32, 14);
    VideoFrames b = random_video(2, 32, 48, 15);
    MaskSequence m;
    m.data = Tensor({2, 1, 32, 32});
    CHECK_THROWS_AS(blend_output(a, b, m, 1.0), std::invalid_argument);
}

TEST_CASE("metadata sidecar carries fps") {
    TempDir dir("frames_meta");
    VideoFrames v = random_video(1, 32, 32, 16);
    v.fps = 25.0;
    save_frames(dir.str(), v);
    VideoFrames loaded = load_frames(dir.str());
    CHECK(loaded.fps == doctest::Approx(25.0));
}
