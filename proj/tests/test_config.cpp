#include <doctest.h>

#include "stgrat/config.hpp"
#include "test_util.hpp"

using namespace stgrat;

TEST_CASE("key value parsing") {
  const KeyValues kv = parse_key_values("# run\nlayers = 2\n\n d_model=32 # width\nlayers=3\nspeeds = data/a b.csv\n");
  REQUIRE(kv.entries.size() == 3);
  CHECK(*kv.get("layers") == "3");
  CHECK(*kv.get("d_model") == "32");
  CHECK(*kv.get("speeds") == "data/a b.csv");
  CHECK(kv.get("heads") == nullptr);
  CHECK(kv.entries[0].first == "layers");

  try {
    parse_key_values("layers = 2\njust words\n", "run.cfg");
    FAIL("expected a parse error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()) == "run.cfg:2: expected 'key = value'");
  }
  CHECK_THROWS_AS(parse_key_values(" = 4\n"), ConfigError);
  CHECK_THROWS_AS(load_key_values("/nonexistent/run.cfg"), ConfigError);

  const auto dir = test::scratch_dir("config");
  test::write_text(dir / "run.cfg", "heads=4\n");
  CHECK(*load_key_values((dir / "run.cfg").string()).get("heads") == "4");
}

TEST_CASE("applying configuration") {
  RunConfig rc;
  CHECK(rc.model.layers == 4);
  CHECK(rc.model.d_model == 128);
  CHECK(rc.model.heads == 4);
  CHECK(rc.model.dropout == 0.3);
  CHECK(rc.train.batch_size == 20);
  CHECK(rc.train.warmup_steps == 4000);
  CHECK(rc.train.kappa == 10000);
  CHECK(rc.data.cutoff == 0.1);

  apply_key_values(rc, parse_key_values("layers=2\nd_model=32\nuse_sentinel=off\nsentinel_form=literal\n"
                                        "epsilon=0.25\nedge_weighting=var\nnormalization=minmax\nseed=9\n"
                                        "embedding_dim=16\noutput_dir=out\n"));
  CHECK(rc.model.layers == 2);
  CHECK(rc.model.d_model == 32);
  CHECK_FALSE(rc.model.use_sentinel);
  CHECK(rc.model.sentinel_form == SentinelForm::literal);
  CHECK(rc.train.forced_epsilon == 0.25);
  CHECK(rc.data.weighting == EdgeWeighting::var_augmented);
  CHECK(rc.data.normalization == NormalizationMethod::minmax);
  CHECK(rc.train.seed == 9);
  CHECK(rc.data.line.dim == 16);
  CHECK(rc.output_dir == "out");
  apply_key_values(rc, parse_key_values("epsilon=schedule\n"));
  CHECK_FALSE(rc.train.forced_epsilon.has_value());

  auto key_of = [&](const std::string& text) {
    try {
      apply_key_values(rc, parse_key_values(text));
    } catch (const ConfigError& e) {
      return e.key();
    }
    return std::string("<none>");
  };
  CHECK(key_of("layer=2\n") == "layer");
  CHECK(key_of("layers=two\n") == "layers");
  CHECK(key_of("dropout=high\n") == "dropout");
  CHECK(key_of("use_prior=maybe\n") == "use_prior");
  CHECK(key_of("seed=-1\n") == "seed");
  CHECK(key_of("edge_weighting=cosine\n") == "edge_weighting");

  const auto& keys = known_config_keys();
  for (const char* k : {"layers", "d_model", "heads", "K", "range", "batch_size", "warmup_steps", "kappa", "speeds", "graph"}) {
    CHECK(std::find(keys.begin(), keys.end(), k) != keys.end());
  }
}

TEST_CASE("canonical model configuration round trips") {
  ModelConfig m;
  m.layers = 2;
  m.dropout = 0.125;
  m.directed_heads = false;
  m.sentinel_form = SentinelForm::literal;
  const std::string text = canonical_model_config(m);
  CHECK(parse_model_config(text) == m);
  CHECK(canonical_model_config(parse_model_config(text)) == text);
  CHECK(text.find("directed_heads=false\n") != std::string::npos);
  CHECK(text.starts_with("K=2\n"));
}
