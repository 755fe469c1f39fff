// Minimal external inpainting program for exercising the prior contract:
//   external_prior_stub --frames <dir> --masks <dir> --out <dir>
// TEST_PRIOR_MODE selects behavior: "copy" (default) writes the input back,
// "builtin" runs the library's propagation prior, "tamper" corrupts an
// unmasked pixel, "hole" drops the last frame.

#include <cstdlib>
#include <cstring>
#include <iostream>
#include <string>

#include "diffueraser/prior.hpp"
#include "diffueraser/video_io.hpp"

using namespace diffueraser;

int main(int argc, char** argv) {
    std::string frames_dir, masks_dir, out_dir;
    for (int i = 1; i + 1 < argc; i += 2) {
        if (std::strcmp(argv[i], "--frames") == 0) frames_dir = argv[i + 1];
        else if (std::strcmp(argv[i], "--masks") == 0) masks_dir = argv[i + 1];
        else if (std::strcmp(argv[i], "--out") == 0) out_dir = argv[i + 1];
    }
    if (frames_dir.empty() || masks_dir.empty() || out_dir.empty()) {
        std::cerr << "usage: external_prior_stub --frames D --masks D --out D\n";
        return 2;
    }
    const char* mode_env = std::getenv("TEST_PRIOR_MODE");
    std::string mode = mode_env ? mode_env : "copy";
    try {
        VideoFrames frames = load_frames(frames_dir);
        MaskSequence masks = load_masks(masks_dir, frames.frames());
        VideoFrames out = frames;
        if (mode == "builtin") {
            out = builtin_prior(frames, masks).frames;
        } else if (mode == "tamper") {
            // blank one unmasked pixel
            int64_t plane = frames.height() * frames.width();
            for (int64_t p = 0; p < plane; ++p)
                if (masks.data[p] == 0.0) {
                    for (int64_t c = 0; c < 3; ++c)
                        out.data[c * plane + p] = out.data[c * plane + p] > 0.5 ? 0.0 : 1.0;
                    break;
                }
        } else if (mode == "hole") {
            Tensor trimmed({frames.frames() - 1, 3, frames.height(), frames.width()});
            std::memcpy(trimmed.ptr(), out.data.ptr(),
                        static_cast<size_t>(trimmed.numel()) * sizeof(double));
            out.data = std::move(trimmed);
        } else if (mode != "copy") {
            std::cerr << "unknown TEST_PRIOR_MODE: " << mode << "\n";
            return 2;
        }
        save_frames(out_dir, out);
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "stub failed: " << e.what() << "\n";
        return 1;
    }
}
