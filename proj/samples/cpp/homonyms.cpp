// Copyright 2026 The defmod Authors
// SPDX-License-Identifier: Apache-2.0

// Trains a non-contextual and an ADD-marked model on the homonym sample and
// prints one greedy definition per sense from each.
//
//   defmod_example_homonyms <samples/homonyms.jsonl> [steps]

#include <fstream>
#include <iostream>
#include <string>

#include "defmod/defmod.hpp"

using namespace defmod;

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: " << argv[0] << " homonyms.jsonl [steps]\n";
    return 2;
  }
  const std::size_t steps = argc > 2 ? std::stoul(argv[2]) : 800;
  std::ifstream in(argv[1]);
  const auto corpus = load_corpus(in, true, argv[1]).examples;

  for (auto mode : {MarkingMode::kNonContextual, MarkingMode::kAdd}) {
    ModelConfig cfg;
    cfg.d_model = 32;
    cfg.heads = 4;
    cfg.enc_layers = 2;
    cfg.dec_layers = 2;
    cfg.ffn_dim = 64;
    cfg.dropout = 0.0;
    cfg.marking = mode;
    const Vocabularies vocabs = build_vocabularies(corpus, cfg);
    Rng rng(1);
    auto enc = random_table<float>(vocabs.encoder.size(), cfg.d_model, rng);
    auto dec = random_table<float>(vocabs.decoder.size(), cfg.d_model, rng);
    Seq2Seq<float> model(cfg, vocabs.encoder, vocabs.decoder, std::move(enc), std::move(dec), rng);
    const EncodedCorpus data = encode_corpus(corpus, cfg, vocabs);

    TrainConfig train;
    train.max_steps = steps;
    train.warmup = 200;
    train.seed = 3;
    Trainer<float> trainer(model, train, data.examples, {});
    for (std::size_t s = 0; s < steps; ++s) trainer.step();

    std::cout << "== marking " << to_string(mode) << ", perplexity "
              << perplexity(model, data.examples).perplexity() << '\n';
    // First and fifth example of each word are its two senses.
    for (std::size_t i = 0; i < data.examples.size(); i += 4) {
      const auto g = generate(model, data.examples[i].source, data.definienda[i]);
      std::cout << to_tsv(g) << '\n';
    }
  }
  return 0;
}
