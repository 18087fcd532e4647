#include "doctest.h"
#include "rils/config.hpp"
#include "rils/errors.hpp"

using namespace rils;

TEST_CASE("defaults validate and round-trip through text") {
    RunConfig cfg;
    cfg.validate();
    RunConfig back = RunConfig::parse(cfg.serialize());
    CHECK(back.serialize() == cfg.serialize());
    CHECK(back.d_v == 64);
    CHECK(back.batch_size == 16);
    CHECK(back.mask_ratio == 0.75);
    CHECK(back.tau_target == 0.04);
    CHECK(back.tau_pred == 0.1);
    CHECK(back.lambda1 == 1.0);
    CHECK(back.lambda2 == 0.5);
}

TEST_CASE("unknown keys are errors") {
    CHECK_THROWS_AS(RunConfig::parse("mask_ration = 0.75\n"), ConfigError);
}

TEST_CASE("duplicate keys are errors") {
    CHECK_THROWS_AS(RunConfig::parse("mask_ratio = 0.5\nmask_ratio = 0.75\n"), ConfigError);
}

TEST_CASE("validation names the offending field") {
    try {
        RunConfig::parse("mask_ratio = 1.5\n");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("mask_ratio") != std::string::npos);
    }
    CHECK_THROWS_AS(RunConfig::parse("reconstruction_space = pixels\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("patch_size = 7\n"), ConfigError);      // 32 % 7 != 0
    CHECK_THROWS_AS(RunConfig::parse("heads_vision = 3\n"), ConfigError);    // 64 % 3 != 0
    CHECK_THROWS_AS(RunConfig::parse("tau_target = 0\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("warmup_steps = 2000\n"), ConfigError);  // >= total
    CHECK_THROWS_AS(RunConfig::parse("min_lr = 1\n"), ConfigError);           // > base_lr
}

TEST_CASE("comments and blank lines are ignored") {
    RunConfig cfg = RunConfig::parse("# a comment\n\n  mask_ratio = 0.6  # trailing\n");
    CHECK(cfg.mask_ratio == 0.6);
}

TEST_CASE("paper-scale values") {
    RunConfig cfg = RunConfig::paper_scale();
    cfg.validate();
    CHECK(cfg.d_v == 768);
    CHECK(cfg.d_t == 512);
    CHECK(cfg.vision_depth == 12);
    CHECK(cfg.text_depth == 12);
    CHECK(cfg.decoder_depth == 1);
    CHECK(cfg.heads_vision == 12);
    CHECK(cfg.heads_text == 8);
    CHECK(cfg.patch_size == 16);
    CHECK(cfg.image_size == 224);
    CHECK(cfg.max_len == 77);
    CHECK(cfg.weight_decay == 0.5);
    CHECK(cfg.base_lr == 5e-4);
    CHECK(cfg.min_lr == 1e-5);
    CHECK(cfg.beta1 == 0.9);
    CHECK(cfg.beta2 == 0.98);
    CHECK(cfg.batch_size == 4096);
    CHECK(cfg.mask_ratio == 0.75);
    CHECK(cfg.n_patches() == 196);
}

TEST_CASE("config hash is stable and value-sensitive") {
    RunConfig a, b;
    CHECK(config_hash(a) == config_hash(b));
    b.mask_ratio = 0.6;
    CHECK(config_hash(a) != config_hash(b));
}
