#include "diff/fixtures.hpp"

#include <random>

namespace diff {

TinyFixture tiny_fixture(std::uint64_t seed) {
  TinyFixture f;
  std::mt19937_64 rng(seed);
  f.catalog.n_items = 20;
  f.catalog.m = 2;
  f.catalog.attr_vocab_sizes = {5, 5};
  f.catalog.attrs.push_back({0, 0});
  std::uniform_int_distribution<int> value(1, 5), item(1, 20);
  for (int i = 1; i <= 20; ++i) f.catalog.attrs.push_back({value(rng), value(rng)});

  const int lengths[] = {8, 5, 1, 3};
  for (int r = 0; r < 4; ++r) {
    SequenceExample ex;
    ex.user = r;
    for (int t = 0; t < lengths[r]; ++t) ex.items.push_back(item(rng));
    ex.target = item(rng);
    ex.full_length = lengths[r] + 1;
    f.examples.push_back(ex);
  }
  f.batch = make_batch(f.examples, f.catalog, 8);

  EncoderConfig& e = f.config.encoder;
  e.d = 8;
  e.heads = 2;
  e.layers = 1;
  e.max_len = 8;
  e.cutoff = 3;
  e.alpha = 0.5;
  e.fusion = FusionKind::kGate;
  f.config.lambda = 10.0;
  f.config.init_seed = seed;
  return f;
}

}  // namespace diff
