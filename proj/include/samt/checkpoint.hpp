// SPDX-License-Identifier: Apache-2.0
#pragma once

// Checkpoint layout (little-endian):
//   "SAMT"  u32 version  u32 config_len  config_text
//   records until EOF: u32 name_len, name, u32 rank, u32 dims[rank], f32 data
// Optimizer state, when present, is stored as extra records named
// "optim.m.<param>", "optim.v.<param>" and "optim.step".

#include <bit>
#include <cstdint>
#include <cstring>
#include <map>
#include <optional>
#include <string>

#include "samt/errors.hpp"
#include "samt/frontend.hpp"
#include "samt/model.hpp"
#include "samt/optim.hpp"

namespace samt {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelConfig config;
    ModelParams<float> params;
    std::optional<AdamWState<float>> optimizer;
};

namespace detail {

inline void put_record(std::string& out, const std::string& name, const Tensor<float>& t) {
    put_u32le(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32le(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_u32le(out, static_cast<std::uint32_t>(d));
    out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float));
}

class Reader {
public:
    explicit Reader(const std::string& bytes) : bytes_(bytes) {}
    bool done() const { return pos_ == bytes_.size(); }
    std::uint32_t u32() {
        need(4);
        const auto v = read_u32le(reinterpret_cast<const unsigned char*>(bytes_.data() + pos_));
        pos_ += 4;
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    void floats(float* dst, std::size_t n) {
        need(n * sizeof(float));
        std::memcpy(dst, bytes_.data() + pos_, n * sizeof(float));
        pos_ += n * sizeof(float);
    }

private:
    void need(std::size_t n) const { require_input(pos_ + n <= bytes_.size(), "truncated checkpoint"); }
    const std::string& bytes_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline std::string encode_checkpoint(const ModelConfig& cfg, const ModelParams<float>& params,
                                     const AdamWState<float>* optimizer = nullptr) {
    static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");
    std::string out = "SAMT";
    detail::put_u32le(out, kCheckpointVersion);
    const std::string text = cfg.to_text();
    detail::put_u32le(out, static_cast<std::uint32_t>(text.size()));
    out += text;
    std::vector<std::string> names;
    params.visit([&](const std::string& name, const Tensor<float>& t) {
        detail::put_record(out, name, t);
        names.push_back(name);
    });
    if (optimizer && optimizer->initialized()) {
        for (std::size_t i = 0; i < names.size(); ++i) detail::put_record(out, "optim.m." + names[i], optimizer->m[i]);
        for (std::size_t i = 0; i < names.size(); ++i) detail::put_record(out, "optim.v." + names[i], optimizer->v[i]);
        detail::put_record(out, "optim.step", Tensor<float>({1}, static_cast<float>(optimizer->step)));
    }
    return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
    detail::Reader r(bytes);
    require_input(r.str(4) == "SAMT", "not a checkpoint (bad magic)");
    const auto version = r.u32();
    require_input(version == kCheckpointVersion, "unsupported checkpoint version " + std::to_string(version));
    Checkpoint ck;
    ck.config = ModelConfig::from_text(r.str(r.u32()));
    ck.params = ModelParams<float>(ck.config);

    std::map<std::string, Tensor<float>> records;
    while (!r.done()) {
        std::string name = r.str(r.u32());
        const auto rank = r.u32();
        require_input(rank <= 8, "implausible tensor rank in checkpoint");
        std::vector<std::size_t> dims(rank);
        for (auto& d : dims) d = r.u32();
        Tensor<float> t(dims);
        r.floats(t.data(), t.size());
        require_input(!records.count(name), "duplicate checkpoint record " + name);
        records.emplace(std::move(name), std::move(t));
    }

    auto take = [&](const std::string& name, const std::vector<std::size_t>& shape) {
        auto it = records.find(name);
        require_input(it != records.end(), "checkpoint is missing " + name);
        require_input(it->second.shape() == shape, "checkpoint shape mismatch for " + name + ": " +
                                                       shape_string(it->second.shape()) + " vs " + shape_string(shape));
        Tensor<float> t = std::move(it->second);
        records.erase(it);
        return t;
    };
    std::vector<std::string> names;
    ck.params.visit([&](const std::string& name, Tensor<float>& t) {
        t = take(name, t.shape());
        names.push_back(name);
    });
    if (records.count("optim.step")) {
        AdamWState<float> st;
        st.step = static_cast<std::uint64_t>(take("optim.step", {1})[0]);
        ck.params.visit([&](const std::string& name, const Tensor<float>& t) {
            st.m.push_back(take("optim.m." + name, t.shape()));
        });
        ck.params.visit([&](const std::string& name, const Tensor<float>& t) {
            st.v.push_back(take("optim.v." + name, t.shape()));
        });
        ck.optimizer = std::move(st);
    }
    require_input(records.empty(), "unexpected checkpoint record " + (records.empty() ? "" : records.begin()->first));
    return ck;
}

inline void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ModelParams<float>& params,
                            const AdamWState<float>* optimizer = nullptr) {
    detail::write_binary(path, encode_checkpoint(cfg, params, optimizer));
}

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(detail::slurp_binary(path)); }

} // namespace samt
