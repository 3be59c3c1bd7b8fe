// SPDX-License-Identifier: Apache-2.0
#pragma once

// Command dispatch shared by the `samt` binary and the CLI tests.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "samt/bench.hpp"
#include "samt/checkpoint.hpp"
#include "samt/frontend.hpp"
#include "samt/metrics.hpp"
#include "samt/pipeline.hpp"
#include "samt/tokenizer.hpp"
#include "samt/trainer.hpp"

namespace samt::cli {

inline void emit(const std::string& text, const std::string& path, std::ostream& out) {
    if (path.empty() || path == "-")
        out << text;
    else
        detail::write_binary(path, text);
}

/// Runs one command line; returns the process exit code
/// (0 ok, 1 input error, 2 contract violation).
inline int dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Sparse-attention piano transcription toolkit", "samt"};
    app.require_subcommand(1);

    double hop = kDefaultHop;
    std::string input, output, config_path, ckpt_path, ref_path, est_path, csv_path, log_path, scenario_path;
    std::size_t threads = 1;
    std::size_t segment_frames = 512;

    auto* tok = app.add_subcommand("tokenize", "Notes file -> token ids");
    tok->add_option("notes", input, "Notes file")->required();
    tok->add_option("--hop", hop, "Time quantum in seconds");
    tok->add_option("-o,--output", output, "Output token file (default stdout)");

    auto* detok = app.add_subcommand("detokenize", "Token ids -> notes file");
    detok->add_option("tokens", input, "Token id file")->required();
    detok->add_option("--hop", hop, "Time quantum in seconds");
    detok->add_option("-o,--output", output, "Output notes file (default stdout)");

    auto* feat = app.add_subcommand("features", "WAV -> log-mel feature dump");
    feat->add_option("wav", input, "16-bit PCM WAV")->required();
    feat->add_option("-o,--output", output, "Feature file")->required();

    auto* tr = app.add_subcommand("train-toy", "Train on the synthetic task");
    tr->add_option("--config", config_path, "key=value training config")->required();
    tr->add_option("--ckpt", ckpt_path, "Checkpoint output path")->default_val("toy.ckpt");
    tr->add_option("--log", log_path, "Loss log CSV path")->default_val("loss.csv");
    tr->add_option("--threads", threads, "Worker threads for batch items");

    auto* tx = app.add_subcommand("transcribe", "WAV -> notes with a trained checkpoint");
    tx->add_option("wav", input, "16-bit PCM WAV")->required();
    tx->add_option("--ckpt", ckpt_path, "Checkpoint")->required();
    tx->add_option("-o,--output", output, "Output notes file")->required();
    tx->add_option("--segment-frames", segment_frames, "Frames per decoded segment");

    auto* ev = app.add_subcommand("eval", "Note-level P/R/F1 under three criteria");
    ev->add_option("--ref", ref_path, "Reference notes")->required();
    ev->add_option("--est", est_path, "Estimated notes")->required();
    ev->add_option("--csv", csv_path, "Also write CSV here");

    auto* be = app.add_subcommand("bench", "Efficiency sweep");
    be->add_option("--scenario", scenario_path, "Scenario key=value file")->required();
    be->add_option("-o,--output", output, "CSV output")->required();
    be->add_option("--threads", threads, "Worker threads (timing is only comparable at a fixed value)");

    std::vector<std::string> argv_rev(args.rbegin(), args.rend());
    try {
        app.parse(argv_rev);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    }

    try {
        if (tok->parsed()) {
            const auto ids = encode(tokenize(load_notes(input), hop));
            emit(write_token_ids(ids), output, out);
        } else if (detok->parsed()) {
            const auto ids = parse_token_ids(detail::read_file(input));
            const auto res = detokenize_with_warnings(decode(ids), hop);
            if (res.warnings) err << "warning: " << res.warnings << " malformed token events skipped\n";
            emit(write_notes(res.notes), output, out);
        } else if (feat->parsed()) {
            const auto mel = mel_spectrogram(resample(read_wav(input), 16000));
            write_features(output, mel.frames);
            out << "wrote " << mel.frames.rows() << " x " << mel.frames.cols() << " features\n";
        } else if (tr->parsed()) {
            auto cfg = TrainConfig::from_keys(KeyValues::load(config_path));
            if (tr->count("--threads")) cfg.threads = threads;
            const auto result = train(cfg, [&](std::size_t step, double loss) {
                if (step == 1 || step % 100 == 0 || step == cfg.steps) out << "step " << step << " loss " << loss << "\n";
            });
            save_checkpoint(ckpt_path, cfg.model, result.params, &result.optimizer);
            detail::write_binary(log_path, loss_log_csv(result.losses));
            out << "wrote " << ckpt_path << " and " << log_path << "\n";
        } else if (tx->parsed()) {
            const auto ck = load_checkpoint(ckpt_path);
            TranscribeOptions opt;
            opt.segment_frames = segment_frames;
            const auto res = transcribe(ck, read_wav(input), {}, opt);
            if (res.warnings) err << "warning: " << res.warnings << " malformed token events in model output\n";
            detail::write_binary(output, write_notes(res.notes));
            out << "wrote " << res.notes.size() << " notes to " << output << "\n";
        } else if (ev->parsed()) {
            const auto results = evaluate_all(load_notes(ref_path), load_notes(est_path));
            out << eval_table(results);
            if (!csv_path.empty()) detail::write_binary(csv_path, eval_csv(results));
        } else if (be->parsed()) {
            const auto scenario = BenchScenario::from_keys(KeyValues::load(scenario_path));
            const auto records = run_bench(scenario);
            detail::write_binary(output, bench_csv(records));
            out << "wrote " << records.size() << " bench rows to " << output << "\n";
        }
    } catch (const InputError& e) {
        err << "input error: " << e.what() << "\n";
        return 1;
    } catch (const ContractViolation& e) {
        err << "contract violation: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

} // namespace samt::cli
