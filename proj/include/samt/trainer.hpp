// SPDX-License-Identifier: Apache-2.0
#pragma once

// Desk-scale training: a synthetic piano-roll task, AdamW and a loss log.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "samt/checkpoint.hpp"
#include "samt/config.hpp"
#include "samt/errors.hpp"
#include "samt/frontend.hpp"
#include "samt/model.hpp"
#include "samt/optim.hpp"
#include "samt/tokenizer.hpp"

namespace samt {

/// Generator for clips whose feature frames are a noisy piano roll: for every
/// sounding note, channel `pitch` carries velocity/127, channel 128+pitch
/// marks the onset frame and channel 256+pitch the offset frame. The roll
/// plus noise is multiplied by `gain`.
struct SyntheticTask {
    std::size_t notes_per_clip = 2;
    int pitch_lo = 60;
    int pitch_hi = 71;
    std::size_t clip_frames = 32;
    std::size_t min_duration = 2; // frames
    std::size_t max_duration = 12;
    std::vector<std::size_t> velocities{40, 80, 120};
    double noise = 0.05;
    double gain = 10.0;
    std::size_t n_features = 512;
    double hop = kDefaultHop;

    void validate() const {
        require_input(pitch_lo >= 0 && pitch_hi < kPitches && pitch_lo <= pitch_hi, "bad pitch range");
        require_input(n_features >= 384, "synthetic features need at least 384 channels");
        require_input(min_duration >= 1 && min_duration <= max_duration, "bad duration range");
        require_input(clip_frames > max_duration + 1 && clip_frames <= static_cast<std::size_t>(kTimeBins),
                      "clip_frames must exceed max_duration + 1 and fit the time vocabulary");
        require_input(!velocities.empty(), "need at least one velocity level");
        for (auto v : velocities) require_input(v < static_cast<std::size_t>(kVelocities), "velocity out of range");
        require_input(noise >= 0, "noise must be non-negative");
        require_input(gain > 0 && std::isfinite(gain), "gain must be positive");
    }

    static SyntheticTask from_keys(const KeyValues& kv, const std::string& prefix = "task.") {
        SyntheticTask t;
        t.notes_per_clip = kv.get_size(prefix + "notes_per_clip", t.notes_per_clip);
        t.pitch_lo = static_cast<int>(kv.get_size(prefix + "pitch_lo", static_cast<std::size_t>(t.pitch_lo)));
        t.pitch_hi = static_cast<int>(kv.get_size(prefix + "pitch_hi", static_cast<std::size_t>(t.pitch_hi)));
        t.clip_frames = kv.get_size(prefix + "clip_frames", t.clip_frames);
        t.min_duration = kv.get_size(prefix + "min_duration", t.min_duration);
        t.max_duration = kv.get_size(prefix + "max_duration", t.max_duration);
        t.velocities = kv.get_sizes(prefix + "velocities", t.velocities);
        t.noise = kv.get_double(prefix + "noise", t.noise);
        t.gain = kv.get_double(prefix + "gain", t.gain);
        t.n_features = kv.get_size(prefix + "n_features", t.n_features);
        t.validate();
        return t;
    }
};

/// One training clip: notes, the feature frames derived from them, and the
/// token targets.
struct Clip {
    std::vector<NoteEvent> notes;
    Tensor<float> features;
    std::vector<TokenId> tokens;
};

/// Notes on the hop grid; same-pitch notes never touch or overlap.
inline std::vector<NoteEvent> synthetic_notes(const SyntheticTask& task, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> pitch(task.pitch_lo, task.pitch_hi);
    std::uniform_int_distribution<std::size_t> onset(0, task.clip_frames - task.max_duration - 1);
    std::uniform_int_distribution<std::size_t> duration(task.min_duration, task.max_duration);
    std::uniform_int_distribution<std::size_t> vel(0, task.velocities.size() - 1);
    struct Span {
        int pitch;
        std::size_t on, off;
    };
    std::vector<Span> placed;
    std::vector<NoteEvent> notes;
    for (std::size_t k = 0; k < task.notes_per_clip; ++k) {
        for (int attempt = 0; attempt < 32; ++attempt) {
            const Span s{pitch(rng), onset(rng), 0};
            const std::size_t off = s.on + duration(rng);
            const int v = static_cast<int>(task.velocities[vel(rng)]);
            const bool clash = std::any_of(placed.begin(), placed.end(), [&](const Span& o) {
                return o.pitch == s.pitch && s.on <= o.off && o.on <= off;
            });
            if (clash) continue;
            placed.push_back({s.pitch, s.on, off});
            notes.push_back({static_cast<double>(s.on) * task.hop, static_cast<double>(off) * task.hop, s.pitch, v});
            break;
        }
    }
    sort_notes(notes);
    return notes;
}

inline Tensor<float> synthetic_features(const SyntheticTask& task, const std::vector<NoteEvent>& notes,
                                        std::mt19937_64& rng) {
    Tensor<float> f = Tensor<float>::matrix(task.clip_frames, task.n_features);
    for (const auto& n : notes) {
        const auto on = static_cast<std::size_t>(quantize_time(n.onset, task.hop));
        const auto off = static_cast<std::size_t>(quantize_time(n.offset, task.hop));
        const auto p = static_cast<std::size_t>(n.pitch);
        for (std::size_t t = on; t < off && t < task.clip_frames; ++t) f(t, p) += static_cast<float>(n.velocity) / 127.0f;
        f(on, 128 + p) += 1.0f;
        if (off < task.clip_frames) f(off, 256 + p) += 1.0f;
    }
    if (task.noise > 0) {
        std::normal_distribution<float> noise(0.0f, static_cast<float>(task.noise));
        for (auto& v : f.values()) v += noise(rng);
    }
    for (auto& v : f.values()) v *= static_cast<float>(task.gain);
    return f;
}

inline std::vector<Clip> generate_synthetic_batch(const SyntheticTask& task, std::size_t batch_size,
                                                           std::uint64_t seed) {
    task.validate();
    std::mt19937_64 rng(seed);
    std::vector<Clip> batch;
    batch.reserve(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) {
        Clip clip;
        clip.notes = synthetic_notes(task, rng);
        clip.features = synthetic_features(task, clip.notes, rng);
        clip.tokens = encode(tokenize(clip.notes, task.hop));
        batch.push_back(std::move(clip));
    }
    return batch;
}

template <typename T>
std::vector<TrainingExample<T>> to_examples(const std::vector<Clip>& clips) {
    std::vector<TrainingExample<T>> out;
    out.reserve(clips.size());
    for (const auto& c : clips) out.push_back({c.features.template cast<T>(), c.tokens});
    return out;
}

/// Loads every `<name>.wav` in `dir` together with its `<name>.notes`, in
/// name order, as log-mel clips.
inline std::vector<Clip> load_dataset(const std::string& dir, const FrontendConfig& fe = {}) {
    namespace fs = std::filesystem;
    require_input(fs::is_directory(dir), "dataset directory '" + dir + "' not found");
    std::vector<fs::path> wavs;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".wav") wavs.push_back(entry.path());
    std::sort(wavs.begin(), wavs.end());
    std::vector<Clip> clips;
    for (const auto& wav : wavs) {
        fs::path notes_path = wav;
        notes_path.replace_extension(".notes");
        require_input(fs::is_regular_file(notes_path), "'" + wav.string() + "' has no matching .notes file");
        Clip clip;
        clip.notes = load_notes(notes_path.string());
        auto mel = mel_spectrogram(resample(read_wav(wav.string()), fe.sample_rate), fe);
        clip.features = std::move(mel.frames);
        clip.tokens = encode(tokenize(clip.notes, mel.hop));
        clips.push_back(std::move(clip));
    }
    require_input(!clips.empty(), "no .wav/.notes pairs in '" + dir + "'");
    return clips;
}

/// Model used by the synthetic-task runs unless a config overrides it: a
/// two-layer V5-style model with hierarchical pooling.
inline ModelConfig toy_model_config() {
    ModelConfig c;
    c.n_input = 512;
    c.d_model = 64;
    c.heads = 4;
    c.d_ff = 128;
    c.enc_layers = 2;
    c.dec_layers = 2;
    c.window = 8;
    c.dropout = 0.0;
    c.max_output_len = 128;
    c.pooling = hierarchical_pooling(2);
    return ModelConfig::with_variant(c, Variant::V5);
}

struct TrainConfig {
    AdamWConfig adamw{3e-3, 0.01, 0.9, 0.999, 1e-8};
    std::size_t batch_size = 8;
    std::size_t steps = 2000;
    std::uint64_t seed = 1;
    double clip_norm = 1.0;
    std::size_t threads = 1;
    bool fixed_batch = false; // reuse one batch every step (overfitting check)
    std::string data_dir;     // train on .wav/.notes pairs instead of the synthetic task
    ModelConfig model = toy_model_config();
    SyntheticTask task;

    void validate() const {
        require_input(adamw.lr >= 0, "learning rate must be non-negative");
        require_input(batch_size >= 1, "batch size must be at least 1");
        require_input(adamw.beta1 >= 0 && adamw.beta1 < 1 && adamw.beta2 >= 0 && adamw.beta2 < 1, "betas must be in [0, 1)");
        require_input(adamw.eps > 0 && adamw.weight_decay >= 0, "bad AdamW eps or weight decay");
        model.validate();
        task.validate();
        if (data_dir.empty())
            require_input(model.n_input == task.n_features, "model n_input must equal task n_features");
        else
            require_input(model.n_input == FrontendConfig{}.n_mels, "model n_input must equal the mel channel count");
        require_input(model.max_output_len >= 3 * task.notes_per_clip * 2 + 2, "max_output_len too small for the task");
    }

    static TrainConfig from_keys(const KeyValues& kv) {
        TrainConfig c;
        c.adamw.lr = kv.get_double("lr", c.adamw.lr);
        c.adamw.weight_decay = kv.get_double("weight_decay", c.adamw.weight_decay);
        c.adamw.beta1 = kv.get_double("beta1", c.adamw.beta1);
        c.adamw.beta2 = kv.get_double("beta2", c.adamw.beta2);
        c.adamw.eps = kv.get_double("eps", c.adamw.eps);
        c.batch_size = kv.get_size("batch_size", c.batch_size);
        c.steps = kv.get_size("steps", c.steps);
        c.seed = kv.get_size("seed", c.seed);
        c.clip_norm = kv.get_double("clip_norm", c.clip_norm);
        c.threads = kv.get_size("threads", c.threads);
        c.fixed_batch = kv.get("fixed_batch", "false") == "true";
        c.data_dir = kv.get("data_dir", "");
        c.model = ModelConfig::from_keys(kv, "model.", c.model);
        c.task = SyntheticTask::from_keys(kv);
        kv.reject_unused("training config");
        c.validate();
        return c;
    }
};

struct TrainResult {
    ModelParams<float> params;
    AdamWState<float> optimizer;
    std::vector<double> losses; // losses[i] is the loss of step i + 1
};

inline std::uint64_t batch_seed(std::uint64_t seed, std::size_t step) {
    return seed * 1000003ull + static_cast<std::uint64_t>(step);
}

/// Runs `steps` updates. `on_step(step, loss)` is called after each update.
inline TrainResult train(const TrainConfig& cfg, const std::function<void(std::size_t, double)>& on_step = {}) {
    cfg.validate();
    TrainResult r{init_params<float>(cfg.model, cfg.seed), {}, {}};
    const std::vector<Clip> dataset = cfg.data_dir.empty() ? std::vector<Clip>{} : load_dataset(cfg.data_dir);
    auto make_batch = [&](std::uint64_t seed) {
        if (dataset.empty()) return to_examples<float>(generate_synthetic_batch(cfg.task, cfg.batch_size, seed));
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
        std::vector<Clip> chosen;
        for (std::size_t b = 0; b < cfg.batch_size; ++b) chosen.push_back(dataset[pick(rng)]);
        return to_examples<float>(chosen);
    };
    std::vector<TrainingExample<float>> fixed;
    if (cfg.fixed_batch) fixed = make_batch(batch_seed(cfg.seed, 0));
    ModelParams<float> grads;
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        const auto batch = cfg.fixed_batch ? fixed : make_batch(batch_seed(cfg.seed, step));
        double loss = 0;
        try {
            loss = forward_backward<float>(cfg.model, r.params, batch, grads, batch_seed(cfg.seed, step), cfg.threads);
        } catch (const ContractViolation& e) {
            throw ContractViolation("training aborted at step " + std::to_string(step) + ": " + e.what());
        }
        require_contract(std::isfinite(loss), "non-finite loss at step " + std::to_string(step));
        clip_grad_norm(grads, cfg.clip_norm);
        adamw_step(r.params, grads, r.optimizer, cfg.adamw);
        r.losses.push_back(loss);
        if (on_step) on_step(step, loss);
    }
    return r;
}

inline std::string loss_log_csv(const std::vector<double>& losses) {
    std::string out = "step,loss\n";
    char buf[64];
    for (std::size_t i = 0; i < losses.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%.9g\n", i + 1, losses[i]);
        out += buf;
    }
    return out;
}

} // namespace samt
