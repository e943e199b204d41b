// Copyright 2026 The defmod Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end. Everything lives in run_cli so tests can drive the
// commands in-process with captured streams.

#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "defmod/defmod.hpp"

namespace defmod::cli {

inline constexpr const char* kVersion = "defmod 1.0.0";

enum ExitCode : int { kOk = 0, kRuntimeFailure = 1, kUsageError = 2, kDataError = 3 };

namespace detail {

namespace fs = std::filesystem;

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise<IoError>("cannot open ", path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << v;
  return ss.str();
}

inline bool looks_like_jsonl(const std::string& text) {
  const auto p = text.find_first_not_of(" \t\r\n");
  return p != std::string::npos && text[p] == '{';
}

// TSV input: `word<TAB>definition` (nor) or `word<TAB>cue<TAB>definition`
// (gad), all fields whitespace-tokenized.
inline std::vector<DefinitionExample> read_tsv(const std::string& text, bool with_cue, const std::string& origin) {
  std::vector<DefinitionExample> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::vector<std::string> fields;
    std::stringstream ls(line);
    for (std::string f; std::getline(ls, f, '\t');) fields.push_back(f);
    const std::size_t want = with_cue ? 3 : 2;
    if (fields.size() != want) {
      raise<SchemaError>(origin, ":", line_no, ": expected ", want, " tab-separated fields, found ", fields.size());
    }
    DefinitionExample ex;
    ex.word = trim(fields[0]);
    if (with_cue) ex.context = split_whitespace(fields[1]);
    ex.definition = split_whitespace(fields.back());
    if (ex.word.empty() || ex.definition.empty()) {
      raise<SchemaError>(origin, ":", line_no, ": empty word or definition");
    }
    out.push_back(std::move(ex));
  }
  return out;
}

inline std::vector<DefinitionExample> load_examples(const std::string& path) {
  return load_corpus(path, true).examples;
}

inline void extend_for_inference(Seq2Seq<float>& model, const std::vector<DefinitionExample>& examples,
                                 std::uint64_t seed) {
  const auto& cfg = model.config();
  std::vector<std::string> tokens;
  for (const auto& ex : examples) {
    if (is_contextual(cfg.marking) && ex.context) {
      for (const auto& t : *ex.context) tokens.push_back(cfg.lowercase ? lowercase(t) : t);
    } else {
      tokens.push_back(cfg.lowercase ? lowercase(ex.word) : ex.word);
    }
  }
  Rng rng = Rng::derive(seed, 0x0EC0DE);
  model.extend_encoder_vocabulary(tokens, rng);
}

inline void require_contexts(const std::vector<DefinitionExample>& examples, MarkingMode mode,
                             const std::string& origin) {
  if (!is_contextual(mode)) return;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (!examples[i].context || !examples[i].mark_index) {
      raise<DataError>(origin, ": example ", i + 1, " ('", examples[i].word, "') lacks a marked context, required by ",
                       to_string(mode), " marking");
    }
  }
}

// -- prepare ----------------------------------------------------------------

struct PrepareArgs {
  std::string input, format, mode, output, report;
  std::size_t max_src_len = 128, max_tgt_len = 64;
};

inline int cmd_prepare(const PrepareArgs& a, std::ostream& out) {
  if (a.format == "nor" && a.mode == "curate") {
    raise<ConfigError>("--mode curate needs contexts, which the nor format does not have");
  }
  const std::string text = read_file(a.input);
  const bool with_cue = a.format == "gad";
  std::vector<DefinitionExample> input;
  if (looks_like_jsonl(text)) {
    std::istringstream in(text);
    input = load_corpus(in, true, a.input).examples;
  } else {
    input = read_tsv(text, with_cue, a.input);
  }

  std::vector<DefinitionExample> kept;
  std::size_t no_match = 0, too_long = 0, missing_context = 0;
  for (auto ex : input) {
    if (!with_cue) {
      ex.context.reset();
      ex.mark_index.reset();
    } else {
      if (!ex.context) {
        ++missing_context;
        continue;
      }
      if (a.mode == "concat") {
        ex = prepend_definiendum(ex);
      } else {
        auto curated = curate_context(ex);
        if (!curated) {
          ++no_match;
          continue;
        }
        ex = std::move(*curated);
      }
    }
    const std::size_t src = ex.context ? ex.context->size() : 1;
    if (src > a.max_src_len || ex.definition.size() + 1 > a.max_tgt_len) {
      ++too_long;
      continue;
    }
    kept.push_back(std::move(ex));
  }
  for (const auto& target : {a.output, a.report}) {
    const fs::path parent = fs::path(target).parent_path();
    if (!target.empty() && !parent.empty()) fs::create_directories(parent);
  }
  write_corpus(a.output, kept);

  nlohmann::ordered_json report;
  report["input"] = a.input;
  report["format"] = a.format;
  report["mode"] = a.mode.empty() ? nlohmann::ordered_json() : nlohmann::ordered_json(a.mode);
  report["read"] = input.size();
  report["written"] = kept.size();
  report["dropped"] = {{"no_match", no_match}, {"too_long", too_long}, {"missing_context", missing_context}};
  report["max_src_len"] = a.max_src_len;
  report["max_tgt_len"] = a.max_tgt_len;
  report["stats"] = kept.empty() ? nlohmann::ordered_json() : corpus_stats(kept).to_json();
  if (!a.report.empty()) {
    std::ofstream r(a.report, std::ios::binary);
    if (!r) raise<IoError>("cannot write report ", a.report);
    r << report.dump(2) << '\n';
  }
  out << report.dump() << '\n';
  return kOk;
}

// -- train ------------------------------------------------------------------

struct TrainArgs {
  std::string config, train, valid, embeddings, marking, out_dir;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
};

inline int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  if (!a.seed) raise<ConfigError>("--seed is required");
  // Precedence: flags > --set > config file > defaults.
  KeyValues kv = a.config.empty() ? KeyValues{} : load_key_values(a.config);
  for (const auto& o : a.overrides) {
    auto [k, v] = parse_assignment(o);
    kv[k] = v;
  }
  if (!a.marking.empty()) kv["marking"] = a.marking;
  kv["seed"] = std::to_string(*a.seed);
  ModelConfig mcfg;
  TrainConfig tcfg;
  apply_key_values(kv, mcfg, tcfg);
  mcfg.validate();
  tcfg.validate();

  const auto train_examples = load_examples(a.train);
  const auto valid_examples = a.valid.empty() ? std::vector<DefinitionExample>{} : load_examples(a.valid);
  if (train_examples.empty()) raise<DataError>("training corpus ", a.train, " is empty");
  require_contexts(train_examples, mcfg.marking, a.train);
  require_contexts(valid_examples, mcfg.marking, a.valid);

  const fs::path dir(a.out_dir);
  fs::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["version"] = kVersion;
  manifest["seed"] = *a.seed;
  manifest["model_config"] = mcfg.to_json();
  manifest["train_config"] = tcfg.to_json();
  nlohmann::ordered_json corpora;
  corpora["train"] = {{"path", a.train}, {"fnv1a", hex64(fnv1a(read_file(a.train)))}};
  if (!a.valid.empty()) corpora["valid"] = {{"path", a.valid}, {"fnv1a", hex64(fnv1a(read_file(a.valid)))}};
  if (!a.embeddings.empty()) {
    corpora["embeddings"] = {{"path", a.embeddings}, {"fnv1a", hex64(fnv1a(read_file(a.embeddings)))}};
  }
  manifest["inputs"] = corpora;
  {
    std::ofstream m(dir / "manifest.json", std::ios::binary);
    if (!m) raise<IoError>("cannot write ", (dir / "manifest.json").string());
    m << manifest.dump(2) << '\n';
  }

  const Vocabularies vocabs = build_vocabularies(train_examples, mcfg);
  vocabs.encoder.save((dir / "encoder.vocab").string());
  vocabs.decoder.save((dir / "decoder.vocab").string());
  Rng init(*a.seed);
  auto warn = [&err](const std::string& msg) { err << "warning: " << msg << '\n'; };
  EmbeddingTable<float> enc_table, dec_table;
  if (a.embeddings.empty()) {
    enc_table = random_table<float>(vocabs.encoder.size(), mcfg.d_model, init);
    dec_table = random_table<float>(vocabs.decoder.size(), mcfg.d_model, init);
  } else {
    enc_table = load_pretrained<float>(a.embeddings, vocabs.encoder, mcfg.d_model, init, warn);
    dec_table = load_pretrained<float>(a.embeddings, vocabs.decoder, mcfg.d_model, init, nullptr);
  }
  Seq2Seq<float> model(mcfg, vocabs.encoder, vocabs.decoder, std::move(enc_table), std::move(dec_table), init);

  const EncodedCorpus train_enc = encode_corpus(train_examples, mcfg, vocabs);
  const EncodedCorpus valid_enc = encode_corpus(valid_examples, mcfg, vocabs);
  if (train_enc.dropped_too_long + valid_enc.dropped_too_long > 0) {
    err << "warning: dropped " << train_enc.dropped_too_long << " training and " << valid_enc.dropped_too_long
        << " validation examples over the length limits\n";
  }
  if (train_enc.examples.empty()) raise<DataError>("no training example fits the length limits");

  std::ofstream log(dir / "train_log.jsonl", std::ios::binary);
  if (!log) raise<IoError>("cannot write step log");
  Trainer<float> trainer(model, tcfg, train_enc.examples, valid_enc.examples);
  TrainResult result = trainer.run(
      [&](const StepLog& s) {
        nlohmann::ordered_json j;
        j["step"] = s.step;
        j["lr"] = s.lr;
        j["train_loss"] = s.train_loss;
        if (s.valid_perplexity) j["valid_perplexity"] = *s.valid_perplexity;
        log << j.dump() << '\n';
      },
      dir);
  log.flush();

  nlohmann::ordered_json summary;
  summary["best_step"] = result.best_step;
  summary["best_perplexity"] = result.best_perplexity;
  summary["steps_run"] = result.steps_run;
  summary["early_stopped"] = result.early_stopped;
  summary["trainable_parameters"] = model.trainable_parameter_count();
  summary["best_checkpoint"] = (dir / "best.dmck").string();
  out << summary.dump() << '\n';
  return kOk;
}

// -- eval / generate / stats / gradcheck ------------------------------------

inline int cmd_eval(const std::string& checkpoint, const std::string& data, bool per_example, std::uint64_t seed,
                    std::ostream& out) {
  Seq2Seq<float> model = restore_model<float>(load_checkpoint(checkpoint));
  const auto examples = load_examples(data);
  require_contexts(examples, model.config().marking, data);
  extend_for_inference(model, examples, seed);
  const EncodedCorpus enc =
      encode_corpus(examples, model.config(), Vocabularies{model.encoder_vocab(), model.decoder_vocab()});
  if (enc.examples.empty()) raise<DataError>("no evaluation example fits the length limits");
  EvalReport report = perplexity(model, enc.examples, 8192, per_example);
  nlohmann::ordered_json j = report.to_json();
  j["examples"] = enc.examples.size();
  j["dropped_too_long"] = enc.dropped_too_long;
  out << j.dump() << '\n';
  return kOk;
}

struct GenerateArgs {
  std::string checkpoint, input, strategy = "greedy";
  std::size_t beam_size = 4;
  bool mask_definiendum = false, allow_unk = false;
  std::uint64_t seed = 0;
};

inline int cmd_generate(const GenerateArgs& a, std::ostream& out, std::ostream& err) {
  Seq2Seq<float> model = restore_model<float>(load_checkpoint(a.checkpoint));
  const auto examples = load_examples(a.input);
  require_contexts(examples, model.config().marking, a.input);
  extend_for_inference(model, examples, a.seed);
  GenerateOptions opt;
  opt.strategy = a.strategy == "beam" ? SearchStrategy::kBeam : SearchStrategy::kGreedy;
  opt.beam_size = a.beam_size;
  opt.mask_definiendum = a.mask_definiendum;
  opt.allow_unk = a.allow_unk;
  opt.lowercase = model.config().lowercase;
  std::vector<GenerationResult> results;
  out << generations_tsv_header() << '\n';
  for (const auto& ex : examples) {
    const MarkedSequence src = build_source(ex, model.config().marking, model.encoder_vocab(),
                                            model.config().lowercase, model.config().max_src_len);
    results.push_back(generate(model, src, ex.word, opt));
    out << to_tsv(results.back()) << '\n';
  }
  if (!results.empty()) {
    err << nlohmann::ordered_json{{"generated", results.size()},
                                  {"self_reference_rate", self_reference_rate(results)}}
               .dump()
        << '\n';
  }
  return kOk;
}

inline int cmd_stats(const std::string& data, std::ostream& out) {
  out << corpus_stats(load_examples(data)).to_json().dump() << '\n';
  return kOk;
}

inline int cmd_gradcheck(std::uint64_t seed, std::ostream& out) {
  bool ok = true;
  out << std::left << std::setw(28) << "check" << std::setw(14) << "max_rel_err" << std::setw(10) << "tolerance"
      << "status\n";
  for (const auto& c : run_gradcheck_suite(seed)) {
    ok = ok && c.report.passed();
    out << std::left << std::setw(28) << c.name << std::setw(14) << std::scientific << std::setprecision(3)
        << c.report.worst() << std::setw(10) << std::setprecision(0) << c.report.tolerance << std::defaultfloat
        << (c.report.passed() ? "PASS" : "FAIL") << '\n';
  }
  return ok ? kOk : kRuntimeFailure;
}

}  // namespace detail

/// Entry point; `args` excludes the program name. Returns the exit code.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Definition modeling with marked-context Transformers", "defmod"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  detail::PrepareArgs prep;
  auto* prepare = app.add_subcommand("prepare", "Convert a raw corpus to marked JSON-Lines");
  prepare->add_option("--input", prep.input, "JSON-Lines or TSV input")->required()->check(CLI::ExistingFile);
  prepare->add_option("--format", prep.format, "nor (no contexts) or gad (cues)")
      ->required()
      ->check(CLI::IsMember({"nor", "gad"}));
  prepare->add_option("--mode", prep.mode, "concat (prepend definiendum) or curate (keep matching cues)")
      ->check(CLI::IsMember({"concat", "curate"}));
  prepare->add_option("--output", prep.output, "JSON-Lines output")->required();
  prepare->add_option("--report", prep.report, "JSON sidecar report");
  prepare->add_option("--max-src-len", prep.max_src_len)->capture_default_str();
  prepare->add_option("--max-tgt-len", prep.max_tgt_len)->capture_default_str();

  detail::TrainArgs tr;
  std::uint64_t train_seed = 0;
  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", tr.config, "key=value file")->check(CLI::ExistingFile);
  train->add_option("--train", tr.train, "training corpus")->required()->check(CLI::ExistingFile);
  train->add_option("--valid", tr.valid, "validation corpus")->check(CLI::ExistingFile);
  train->add_option("--embeddings", tr.embeddings, "pretrained text vectors")->check(CLI::ExistingFile);
  train->add_option("--marking", tr.marking)->check(CLI::IsMember({"none", "add", "select"}));
  train->add_option("--out-dir", tr.out_dir)->required();
  auto* seed_opt = train->add_option("--seed", train_seed)->required();
  train->add_option("--set", tr.overrides, "key=value override, repeatable");

  std::string ck, data, input, strategy = "greedy";
  bool per_example = false;
  std::uint64_t eval_seed = 0;
  auto* eval = app.add_subcommand("eval", "Perplexity of a checkpoint on a corpus");
  eval->add_option("--checkpoint", ck)->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data)->required()->check(CLI::ExistingFile);
  eval->add_flag("--per-example", per_example);
  eval->add_option("--seed", eval_seed, "seed for rows of unseen source tokens")->capture_default_str();

  detail::GenerateArgs gen;
  auto* generate_cmd = app.add_subcommand("generate", "Produce definitions");
  generate_cmd->add_option("--checkpoint", gen.checkpoint)->required()->check(CLI::ExistingFile);
  generate_cmd->add_option("--input", gen.input)->required()->check(CLI::ExistingFile);
  generate_cmd->add_option("--strategy", gen.strategy)->check(CLI::IsMember({"greedy", "beam"}))->capture_default_str();
  generate_cmd->add_option("--beam-size", gen.beam_size)->check(CLI::PositiveNumber)->capture_default_str();
  generate_cmd->add_flag("--mask-definiendum", gen.mask_definiendum);
  generate_cmd->add_flag("--allow-unk", gen.allow_unk);
  generate_cmd->add_option("--seed", gen.seed)->capture_default_str();

  auto* stats = app.add_subcommand("stats", "Corpus statistics");
  stats->add_option("--data", data)->required()->check(CLI::ExistingFile);

  std::uint64_t gc_seed = 0;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gradcheck->add_option("--seed", gc_seed)->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsageError;
  }

  try {
    if (*prepare) return detail::cmd_prepare(prep, out);
    if (*train) {
      if (*seed_opt) tr.seed = train_seed;
      return detail::cmd_train(tr, out, err);
    }
    if (*eval) return detail::cmd_eval(ck, data, per_example, eval_seed, out);
    if (*generate_cmd) return detail::cmd_generate(gen, out, err);
    if (*stats) return detail::cmd_stats(data, out);
    if (*gradcheck) return detail::cmd_gradcheck(gc_seed, out);
  } catch (const ConfigError& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsageError;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const LengthError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const MarkingError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const FormatVersionError& e) {
    err << "checkpoint format error: " << e.what() << '\n';
    return kRuntimeFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeFailure;
  }
  return kUsageError;
}

}  // namespace defmod::cli
