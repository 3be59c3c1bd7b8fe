// SPDX-License-Identifier: Apache-2.0
#pragma once

// Audio -> notes: resample, log-mel, segment-wise greedy decoding.

#include <algorithm>
#include <vector>

#include "samt/checkpoint.hpp"
#include "samt/frontend.hpp"
#include "samt/model.hpp"
#include "samt/tokenizer.hpp"

namespace samt {

struct TranscribeOptions {
    std::size_t segment_frames = 512; // 10.24 s at a 20 ms hop
    std::size_t max_tokens = 0;       // 0: model limit
};

struct Transcription {
    std::vector<NoteEvent> notes;
    int warnings = 0;
};

inline Transcription transcribe_features(const ModelConfig& cfg, const ModelParams<float>& params,
                                         const MelSpectrogram& mel, const TranscribeOptions& opt = {}) {
    require_input(opt.segment_frames >= 1 && opt.segment_frames <= static_cast<std::size_t>(kTimeBins),
                  "segment_frames must be in [1, 600]");
    require_input(mel.frames.cols() == cfg.n_input, "model expects " + std::to_string(cfg.n_input) +
                                                        " input channels, features have " + std::to_string(mel.frames.cols()));
    Transcription out;
    const std::size_t total = mel.frames.rows();
    for (std::size_t start = 0; start < total; start += opt.segment_frames) {
        const std::size_t len = std::min(opt.segment_frames, total - start);
        Tensor<float> seg = Tensor<float>::matrix(len, mel.frames.cols());
        std::copy_n(mel.frames.data() + start * mel.frames.cols(), seg.size(), seg.data());
        const auto ids = greedy_decode(cfg, params, seg, DecodeOptions{opt.max_tokens, true});
        const auto res = detokenize_with_warnings(decode(ids), mel.hop);
        out.warnings += res.warnings;
        const double offset = static_cast<double>(start) * mel.hop;
        for (auto n : res.notes) {
            n.onset += offset;
            n.offset += offset;
            out.notes.push_back(n);
        }
    }
    sort_notes(out.notes);
    return out;
}

inline Transcription transcribe(const Checkpoint& ck, const AudioBuffer& audio, const FrontendConfig& fe = {},
                                const TranscribeOptions& opt = {}) {
    const auto mel = mel_spectrogram(resample(audio, fe.sample_rate), fe);
    return transcribe_features(ck.config, ck.params, mel, opt);
}

} // namespace samt
