#ifndef DIFFUERASER_CHECKPOINT_HPP
#define DIFFUERASER_CHECKPOINT_HPP

#include <cstdint>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "latent_codec.hpp"
#include "network.hpp"
#include "schedule.hpp"

namespace diffueraser {

struct ScheduleConfig {
    int T = 1000;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
    int steps = 50;

    NoiseSchedule make(int steps_override = 0) const {
        return NoiseSchedule::linear(T, beta_start, beta_end,
                                     steps_override > 0 ? steps_override : steps);
    }

    nlohmann::json to_json() const {
        return {{"T", T}, {"beta_start", beta_start}, {"beta_end", beta_end}, {"steps", steps}};
    }

    static ScheduleConfig from_json(const nlohmann::json& j) {
        ScheduleConfig c;
        c.T = j.at("T").get<int>();
        c.beta_start = j.at("beta_start").get<double>();
        c.beta_end = j.at("beta_end").get<double>();
        c.steps = j.at("steps").get<int>();
        return c;
    }
};

// Everything one inference or training run needs: network weights, codec,
// and the schedule the weights were trained against.
struct Model {
    DenoiserParams net;
    LatentCodec codec;
    ScheduleConfig sched;
};

inline Model init_model(const ArchConfig& arch, CodecMode codec_mode, ScheduleConfig sched,
                        uint64_t seed) {
    Model m;
    m.net = init_denoiser(arch, seed);
    m.codec.mode = codec_mode;
    m.codec.params = init_codec(64, seed + 1);
    m.sched = sched;
    return m;
}

// Checkpoint archive: magic, a JSON header (architecture, codec mode,
// schedule, array manifest), then the named arrays as little-endian float64
// in manifest order.
namespace ckpt_detail {

constexpr char kMagic[8] = {'D', 'F', 'E', 'C', 'K', 'P', 'T', '1'};

inline void collect(Model& m, std::vector<Param*>& out) {
    m.net.visit([&](Param& p, ParamGroup) { out.push_back(&p); });
    m.codec.params.visit([&](Param& p, ParamGroup) { out.push_back(&p); });
}

}  // namespace ckpt_detail

inline void save_checkpoint(const std::string& path, Model& m) {
    std::vector<Param*> params;
    ckpt_detail::collect(m, params);
    nlohmann::json header;
    header["format"] = 1;
    header["arch"] = m.net.arch.to_json();
    header["codec_mode"] = codec_mode_name(m.codec.mode);
    header["codec_hidden"] = m.codec.params.hidden;
    header["schedule"] = m.sched.to_json();
    nlohmann::json arrays = nlohmann::json::array();
    for (Param* p : params) arrays.push_back({{"name", p->name}, {"shape", p->value.shape}});
    header["arrays"] = std::move(arrays);

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write checkpoint: " + path);
    f.write(ckpt_detail::kMagic, 8);
    std::string hs = header.dump();
    uint64_t len = hs.size();
    f.write(reinterpret_cast<const char*>(&len), 8);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (Param* p : params)
        f.write(reinterpret_cast<const char*>(p->value.ptr()),
                static_cast<std::streamsize>(p->value.numel() * 8));
    if (!f) throw std::runtime_error("checkpoint write failed: " + path);
}

inline Model load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint not found: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, ckpt_detail::kMagic, 8) != 0)
        throw std::runtime_error("not a checkpoint file: " + path);
    uint64_t len = 0;
    f.read(reinterpret_cast<char*>(&len), 8);
    std::string hs(len, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(len));
    nlohmann::json header = nlohmann::json::parse(hs);

    Model m;
    m.net = init_denoiser(ArchConfig::from_json(header.at("arch")), 0);
    m.codec.mode = codec_mode_from_name(header.at("codec_mode").get<std::string>());
    m.codec.params = init_codec(header.value("codec_hidden", 64), 0);
    m.sched = ScheduleConfig::from_json(header.at("schedule"));

    std::map<std::string, Param*> by_name;
    std::vector<Param*> params;
    ckpt_detail::collect(m, params);
    for (Param* p : params) by_name[p->name] = p;

    for (const auto& a : header.at("arrays")) {
        std::string name = a.at("name").get<std::string>();
        auto shape = a.at("shape").get<std::vector<int64_t>>();
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw std::runtime_error("checkpoint has unknown array: " + name);
        Param* p = it->second;
        if (p->value.shape != shape)
            throw std::runtime_error("checkpoint shape mismatch for " + name);
        f.read(reinterpret_cast<char*>(p->value.ptr()),
               static_cast<std::streamsize>(p->value.numel() * 8));
        by_name.erase(it);
    }
    if (!by_name.empty())
        throw std::runtime_error("checkpoint missing array: " + by_name.begin()->first);
    if (!f) throw std::runtime_error("truncated checkpoint: " + path);
    return m;
}

}  // namespace diffueraser

#endif
