// SPDX-License-Identifier: Apache-2.0
#pragma once

// MIDI-like event vocabulary: absolute time bins, note on/off per pitch,
// velocity levels and three special tokens, packed into 987 integer ids.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "samt/errors.hpp"

namespace samt {

using TokenId = std::int32_t;

enum class TokenKind : std::uint8_t { Pad, Bos, Eos, Time, NoteOn, NoteOff, Velocity };

inline constexpr int kTimeBins = 600;
inline constexpr int kPitches = 128;
inline constexpr int kVelocities = 128;

namespace vocab {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kTimeBase = 3;
inline constexpr TokenId kNoteOnBase = kTimeBase + kTimeBins;      // 603
inline constexpr TokenId kNoteOffBase = kNoteOnBase + kPitches;    // 731
inline constexpr TokenId kVelocityBase = kNoteOffBase + kPitches;  // 859
inline constexpr TokenId kSize = kVelocityBase + kVelocities;      // 987
} // namespace vocab

inline constexpr double kDefaultHop = 0.02;

struct NoteEvent {
    double onset = 0;
    double offset = 0;
    int pitch = 0;
    int velocity = 0;

    friend bool operator==(const NoteEvent&, const NoteEvent&) = default;
};

inline bool is_valid(const NoteEvent& n) {
    return std::isfinite(n.onset) && std::isfinite(n.offset) && n.onset >= 0 && n.offset > n.onset &&
           n.pitch >= 0 && n.pitch < kPitches && n.velocity >= 0 && n.velocity < kVelocities;
}

inline void validate(const NoteEvent& n) {
    require_input(is_valid(n), "invalid note: onset=" + std::to_string(n.onset) +
                                   " offset=" + std::to_string(n.offset) + " pitch=" +
                                   std::to_string(n.pitch) + " velocity=" + std::to_string(n.velocity));
}

/// Orders notes by onset then pitch, the canonical listing order.
inline void sort_notes(std::vector<NoteEvent>& notes) {
    std::sort(notes.begin(), notes.end(), [](const NoteEvent& a, const NoteEvent& b) {
        if (a.onset != b.onset) return a.onset < b.onset;
        if (a.pitch != b.pitch) return a.pitch < b.pitch;
        return a.offset < b.offset;
    });
}

struct Token {
    TokenKind kind = TokenKind::Pad;
    int value = 0;

    static constexpr Token pad() { return {TokenKind::Pad, 0}; }
    static constexpr Token bos() { return {TokenKind::Bos, 0}; }
    static constexpr Token eos() { return {TokenKind::Eos, 0}; }
    static constexpr Token time(int bin) { return {TokenKind::Time, bin}; }
    static constexpr Token note_on(int pitch) { return {TokenKind::NoteOn, pitch}; }
    static constexpr Token note_off(int pitch) { return {TokenKind::NoteOff, pitch}; }
    static constexpr Token velocity(int v) { return {TokenKind::Velocity, v}; }

    friend bool operator==(const Token&, const Token&) = default;
};

inline std::string to_string(TokenKind kind) {
    switch (kind) {
    case TokenKind::Pad: return "PAD";
    case TokenKind::Bos: return "BOS";
    case TokenKind::Eos: return "EOS";
    case TokenKind::Time: return "Time";
    case TokenKind::NoteOn: return "NoteOn";
    case TokenKind::NoteOff: return "NoteOff";
    case TokenKind::Velocity: return "Velocity";
    }
    return "?";
}

inline std::string to_string(const Token& t) {
    switch (t.kind) {
    case TokenKind::Pad:
    case TokenKind::Bos:
    case TokenKind::Eos: return to_string(t.kind);
    default: return to_string(t.kind) + "(" + std::to_string(t.value) + ")";
    }
}

inline TokenId encode(const Token& t) {
    auto in_range = [&](int hi) {
        require_input(t.value >= 0 && t.value < hi, "token value out of range: " + to_string(t));
    };
    switch (t.kind) {
    case TokenKind::Pad: return vocab::kPad;
    case TokenKind::Bos: return vocab::kBos;
    case TokenKind::Eos: return vocab::kEos;
    case TokenKind::Time: in_range(kTimeBins); return vocab::kTimeBase + t.value;
    case TokenKind::NoteOn: in_range(kPitches); return vocab::kNoteOnBase + t.value;
    case TokenKind::NoteOff: in_range(kPitches); return vocab::kNoteOffBase + t.value;
    case TokenKind::Velocity: in_range(kVelocities); return vocab::kVelocityBase + t.value;
    }
    throw InputError("unknown token kind");
}

inline Token decode(TokenId id) {
    require_input(id >= 0 && id < vocab::kSize, "token id out of range: " + std::to_string(id));
    if (id == vocab::kPad) return Token::pad();
    if (id == vocab::kBos) return Token::bos();
    if (id == vocab::kEos) return Token::eos();
    if (id < vocab::kNoteOnBase) return Token::time(id - vocab::kTimeBase);
    if (id < vocab::kNoteOffBase) return Token::note_on(id - vocab::kNoteOnBase);
    if (id < vocab::kVelocityBase) return Token::note_off(id - vocab::kNoteOffBase);
    return Token::velocity(id - vocab::kVelocityBase);
}

inline TokenKind token_type_of(TokenId id) { return decode(id).kind; }

inline std::vector<TokenId> encode(const std::vector<Token>& tokens) {
    std::vector<TokenId> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(encode(t));
    return ids;
}

inline std::vector<Token> decode(const std::vector<TokenId>& ids) {
    std::vector<Token> tokens;
    tokens.reserve(ids.size());
    for (TokenId id : ids) tokens.push_back(decode(id));
    return tokens;
}

/// round(t / hop), half away from zero, clamped to the last time bin.
inline int quantize_time(double t, double hop = kDefaultHop) {
    require_input(std::isfinite(t) && t >= 0, "time must be non-negative");
    require_input(hop > 0, "hop must be positive");
    const double bins = std::round(t / hop);
    return static_cast<int>(std::min<double>(bins, kTimeBins - 1));
}

inline std::vector<Token> tokenize(const std::vector<NoteEvent>& notes, double hop = kDefaultHop) {
    struct Event {
        int bin;
        bool is_offset;
        int pitch;
        int velocity;
    };
    std::vector<Event> events;
    events.reserve(notes.size() * 2);
    for (const auto& n : notes) {
        validate(n);
        events.push_back({quantize_time(n.onset, hop), false, n.pitch, n.velocity});
        events.push_back({quantize_time(n.offset, hop), true, n.pitch, 0});
    }
    std::stable_sort(events.begin(), events.end(), [](const Event& a, const Event& b) {
        if (a.bin != b.bin) return a.bin < b.bin;
        if (a.is_offset != b.is_offset) return !a.is_offset;
        return a.pitch < b.pitch;
    });

    std::vector<Token> out;
    out.reserve(events.size() * 2 + 2);
    out.push_back(Token::bos());
    int current_bin = -1;
    for (const auto& e : events) {
        if (e.bin != current_bin) {
            out.push_back(Token::time(e.bin));
            current_bin = e.bin;
        }
        if (e.is_offset) {
            out.push_back(Token::note_off(e.pitch));
        } else {
            out.push_back(Token::velocity(e.velocity));
            out.push_back(Token::note_on(e.pitch));
        }
    }
    out.push_back(Token::eos());
    return out;
}

struct DetokenizeResult {
    std::vector<NoteEvent> notes;
    int warnings = 0;
};

/// Rebuilds notes from a (possibly model-generated) token stream. Never throws
/// on ordering problems; each anomaly is counted in `warnings`.
inline DetokenizeResult detokenize_with_warnings(const std::vector<Token>& tokens, double hop = kDefaultHop) {
    require_input(hop > 0, "hop must be positive");
    DetokenizeResult result;
    struct Open {
        int pitch;
        int velocity;
        int onset_bin;
    };
    std::vector<Open> open;
    int current_bin = 0;
    int last_time_bin = -1;
    int pending_velocity = -1;
    int last_velocity = -1;

    auto close = [&](std::size_t idx, int off_bin) {
        const Open o = open[idx];
        open.erase(open.begin() + static_cast<std::ptrdiff_t>(idx));
        if (off_bin <= o.onset_bin) {
            ++result.warnings;
            off_bin = o.onset_bin + 1;
        }
        result.notes.push_back({o.onset_bin * hop, off_bin * hop, o.pitch, o.velocity});
    };

    std::size_t start = 0;
    if (tokens.empty() || tokens.front().kind != TokenKind::Bos)
        ++result.warnings;
    else
        start = 1;

    for (std::size_t i = start; i < tokens.size(); ++i) {
        const Token& t = tokens[i];
        if (t.kind == TokenKind::Eos) break;
        switch (t.kind) {
        case TokenKind::Pad: break;
        case TokenKind::Bos: ++result.warnings; break;
        case TokenKind::Time:
            if (t.value < last_time_bin) ++result.warnings;
            current_bin = t.value;
            last_time_bin = t.value;
            pending_velocity = -1;
            break;
        case TokenKind::Velocity:
            if (pending_velocity >= 0) ++result.warnings;
            pending_velocity = t.value;
            last_velocity = t.value;
            break;
        case TokenKind::NoteOn: {
            int velocity = pending_velocity;
            if (velocity < 0) {
                ++result.warnings;
                velocity = last_velocity >= 0 ? last_velocity : 64;
            }
            pending_velocity = -1;
            auto it = std::find_if(open.begin(), open.end(), [&](const Open& o) { return o.pitch == t.value; });
            if (it != open.end()) {
                ++result.warnings;
                close(static_cast<std::size_t>(it - open.begin()), current_bin);
            }
            open.push_back({t.value, velocity, current_bin});
            break;
        }
        case TokenKind::NoteOff: {
            auto it = std::find_if(open.begin(), open.end(), [&](const Open& o) { return o.pitch == t.value; });
            if (it == open.end()) {
                ++result.warnings;
                break;
            }
            close(static_cast<std::size_t>(it - open.begin()), current_bin);
            break;
        }
        case TokenKind::Eos: break;
        }
    }
    const int close_bin = std::max(last_time_bin, 0) + 1;
    while (!open.empty()) close(0, close_bin);
    sort_notes(result.notes);
    return result;
}

inline std::vector<NoteEvent> detokenize(const std::vector<Token>& tokens, double hop = kDefaultHop) {
    return detokenize_with_warnings(tokens, hop).notes;
}

// ---------------------------------------------------------------------------
// Text formats

inline std::string format_seconds(double s) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", s);
    return buf;
}

/// Tab-separated "onset offset pitch velocity", one note per line.
inline std::string write_notes(const std::vector<NoteEvent>& notes) {
    std::string out;
    for (const auto& n : notes) {
        out += format_seconds(n.onset);
        out += '\t';
        out += format_seconds(n.offset);
        out += '\t';
        out += std::to_string(n.pitch);
        out += '\t';
        out += std::to_string(n.velocity);
        out += '\n';
    }
    return out;
}

namespace detail {

inline std::vector<std::string_view> split_tabs(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t pos = 0;
    while (true) {
        const std::size_t tab = line.find('\t', pos);
        fields.push_back(line.substr(pos, tab == std::string_view::npos ? std::string_view::npos : tab - pos));
        if (tab == std::string_view::npos) break;
        pos = tab + 1;
    }
    return fields;
}

template <typename Num>
Num parse_number(std::string_view s, const std::string& context) {
    Num value{};
    const char* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(s.data(), end, value);
    require_input(ec == std::errc() && ptr == end, "bad number '" + std::string(s) + "' " + context);
    return value;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require_input(static_cast<bool>(in), "cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace detail

inline std::vector<NoteEvent> parse_notes(std::string_view text) {
    std::vector<NoteEvent> notes;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        std::string_view line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.empty() || line.front() == '#') continue;
        const std::string ctx = "on notes line " + std::to_string(line_no);
        const auto f = detail::split_tabs(line);
        require_input(f.size() == 4, "expected 4 tab-separated fields " + ctx);
        NoteEvent n{detail::parse_number<double>(f[0], ctx), detail::parse_number<double>(f[1], ctx),
                    detail::parse_number<int>(f[2], ctx), detail::parse_number<int>(f[3], ctx)};
        validate(n);
        notes.push_back(n);
    }
    return notes;
}

inline std::vector<NoteEvent> load_notes(const std::string& path) { return parse_notes(detail::read_file(path)); }

inline std::string write_token_ids(const std::vector<TokenId>& ids) {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += std::to_string(ids[i]);
    }
    out += '\n';
    return out;
}

inline std::vector<TokenId> parse_token_ids(std::string_view text) {
    std::vector<TokenId> ids;
    std::size_t pos = 0;
    auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; };
    while (pos < text.size()) {
        while (pos < text.size() && is_space(text[pos])) ++pos;
        std::size_t end = pos;
        while (end < text.size() && !is_space(text[end])) ++end;
        if (end > pos) {
            const auto id = detail::parse_number<TokenId>(text.substr(pos, end - pos), "in token file");
            decode(id);
            ids.push_back(id);
        }
        pos = end;
    }
    return ids;
}

} // namespace samt
