#pragma once

// Binary checkpoint container:
//   8-byte magic "DDMCKPT\0", u32 major, u32 minor, u64 header length,
//   JSON header (configs, epoch, rng state, parameter names and sizes),
//   parameter values as little-endian float64 in header order,
//   i64 optimizer step count, then Adam first and second moments.
// Readers accept any minor version of their own major version.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "ddm/networks.hpp"
#include "ddm/trainer.hpp"

namespace ddm {

inline constexpr char kCheckpointMagic[8] = {'D', 'D', 'M', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointMajor = 1;
inline constexpr std::uint32_t kCheckpointMinor = 0;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Checkpoint {
    TrainState state;
    TrainConfig train;
};

namespace detail {

template <class T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
void read_pod(std::istream& is, T& v, const std::string& path) {
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw CheckpointError("checkpoint " + path + " is truncated");
}

inline void write_doubles(std::ostream& os, const std::vector<double>& v) {
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline void read_doubles(std::istream& is, std::vector<double>& v, const std::string& path) {
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!is) throw CheckpointError("checkpoint " + path + " is truncated");
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const TrainState& st, const TrainConfig& train) {
    const auto params = st.weights.params();
    nlohmann::json header;
    header["network"] = st.weights.config();
    header["train"] = train;
    header["seed"] = st.weights.seed();
    header["epoch"] = st.epoch;
    std::ostringstream rng;
    rng << st.rng;
    header["rng"] = rng.str();
    header["params"] = nlohmann::json::array();
    for (auto* p : params) header["params"].push_back({{"name", p->name}, {"size", p->size()}});
    const std::string text = header.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw CheckpointError("cannot write checkpoint " + tmp.string());
        os.write(kCheckpointMagic, sizeof kCheckpointMagic);
        detail::write_pod(os, kCheckpointMajor);
        detail::write_pod(os, kCheckpointMinor);
        detail::write_pod(os, static_cast<std::uint64_t>(text.size()));
        os.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (auto* p : params) detail::write_doubles(os, p->value);
        detail::write_pod(os, static_cast<std::int64_t>(st.optimizer.steps()));
        const bool has_moments = st.optimizer.first_moments().size() == params.size();
        detail::write_pod(os, static_cast<std::uint8_t>(has_moments));
        if (has_moments) {
            for (const auto& m : st.optimizer.first_moments()) detail::write_doubles(os, m);
            for (const auto& v : st.optimizer.second_moments()) detail::write_doubles(os, v);
        }
        if (!os) throw CheckpointError("failed writing checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

/// Loads a checkpoint; when `expected` is given the embedded network config
/// must match it.
inline Checkpoint load_checkpoint(const std::filesystem::path& path, const NetworkConfig* expected = nullptr) {
    const std::string p = path.string();
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint " + p);
    char magic[8];
    is.read(magic, sizeof magic);
    if (!is || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
        throw CheckpointError(p + " is not a checkpoint file");
    std::uint32_t major = 0, minor = 0;
    detail::read_pod(is, major, p);
    detail::read_pod(is, minor, p);
    if (major != kCheckpointMajor)
        throw CheckpointError("checkpoint " + p + " has format version " + std::to_string(major) + "." +
                              std::to_string(minor) + " but this build reads version " +
                              std::to_string(kCheckpointMajor) + "." + std::to_string(kCheckpointMinor));
    std::uint64_t len = 0;
    detail::read_pod(is, len, p);
    if (len > (1u << 30)) throw CheckpointError("checkpoint " + p + " has a corrupt header length");
    std::string text(len, '\0');
    is.read(text.data(), static_cast<std::streamsize>(len));
    if (!is) throw CheckpointError("checkpoint " + p + " is truncated");
    const auto header = nlohmann::json::parse(text);

    const NetworkConfig net = header.at("network").get<NetworkConfig>();
    if (expected && !(net == *expected)) {
        std::string why = "network configuration differs";
        if (!(net.image_shape == expected->image_shape))
            why = "image_shape " + net.image_shape.str() + " vs expected " + expected->image_shape.str();
        throw CheckpointError("checkpoint " + p + " does not match the requested model: " + why);
    }
    Checkpoint ck;
    ck.train = header.at("train").get<TrainConfig>();
    ck.state.weights = build_networks(net, header.at("seed").get<std::uint64_t>());
    ck.state.epoch = header.at("epoch").get<int>();
    std::istringstream rng(header.at("rng").get<std::string>());
    rng >> ck.state.rng;
    ck.state.optimizer = Adam(AdamConfig{ck.train.lr});

    auto params = ck.state.weights.params();
    const auto& listed = header.at("params");
    if (listed.size() != params.size()) throw CheckpointError("checkpoint " + p + " parameter list does not match");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (listed[i].at("name") != params[i]->name || listed[i].at("size").get<std::size_t>() != params[i]->size())
            throw CheckpointError("checkpoint " + p + " parameter " + params[i]->name + " does not match");
        detail::read_doubles(is, params[i]->value, p);
    }
    std::int64_t steps = 0;
    std::uint8_t has_moments = 0;
    detail::read_pod(is, steps, p);
    detail::read_pod(is, has_moments, p);
    ck.state.optimizer.set_steps(static_cast<long>(steps));
    if (has_moments) {
        auto& m = ck.state.optimizer.first_moments();
        auto& v = ck.state.optimizer.second_moments();
        m.resize(params.size());
        v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            m[i].resize(params[i]->size());
            detail::read_doubles(is, m[i], p);
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            v[i].resize(params[i]->size());
            detail::read_doubles(is, v[i], p);
        }
    }
    return ck;
}

}  // namespace ddm
