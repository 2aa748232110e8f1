#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include "tokenseg/config.hpp"

using namespace tokenseg;

namespace {

const char* kMinimal = "train.seed=1\ndata.seed=2\n";

ExperimentConfig fancy_config() {
    ExperimentConfig cfg;
    cfg.model.image_size = 16;
    cfg.model.patch_size = 4;
    cfg.model.embed_dim = 8;
    cfg.model.num_layers = 1;
    cfg.model.num_heads = 2;
    cfg.model.mlp_ratio = real(1) / real(3);
    cfg.model.num_classes = 3;
    cfg.train.lr0 = real(0.07);
    cfg.train.sgd_momentum = real(0.1);
    cfg.train.poly_power = real(1.5);
    cfg.train.epochs = 3;
    cfg.train.batch_labeled = 1;
    cfg.train.batch_unlabeled = 4;
    cfg.train.branch = "D2";
    cfg.train.theta = real(0.99);
    cfg.train.rho = real(1) / real(7);
    cfg.train.sup_only = true;
    cfg.train.seed = 1234567890123456789ull;
    cfg.data.n_labeled = 2;
    cfg.data.n_unlabeled = 6;
    cfg.data.n_val = 3;
    cfg.data.seed = 42;
    cfg.aug.swap_ratio = real(0.31);
    cfg.aug.dropout_rate = real(0.2);
    cfg.aug.star_block = 4;
    cfg.aug.weak = false;
    cfg.aug.strong = false;
    cfg.aug.baseline = "classmix";
    cfg.output_dir = "runs/fancy";
    return cfg;
}

}  // namespace

TEST_CASE("a minimal config keeps every documented default") {
    const ExperimentConfig cfg = parse_config_text(kMinimal);
    CHECK(cfg.train.seed == 1);
    CHECK(cfg.data.seed == 2);
    CHECK(cfg.model.image_size == 32);
    CHECK(cfg.model.patch_size == 8);
    CHECK(cfg.model.embed_dim == 64);
    CHECK(cfg.train.lr0 == real(0.1));
    CHECK(cfg.train.branch == "D3");
    CHECK(cfg.train.theta == real(0.999));
    CHECK(cfg.train.rho == real(0.95));
    CHECK_FALSE(cfg.train.sup_only);
    CHECK(cfg.data.n_labeled == 4);
    CHECK(cfg.aug.baseline == "tokenmix");
    CHECK(cfg.aug.swap_ratio == real(0.5));
    CHECK(cfg.output_dir == "runs/out");
}

TEST_CASE("serialize/parse is an exact round trip") {
    const ExperimentConfig cfg = fancy_config();
    const ExperimentConfig back = parse_config_text(serialize_config(cfg));
    CHECK(back == cfg);

    // The default config round-trips too (seeds are always serialized).
    ExperimentConfig dflt;
    dflt.train.seed = 9;
    dflt.data.seed = 10;
    CHECK(parse_config_text(serialize_config(dflt)) == dflt);
}

TEST_CASE("comments, blank lines, and whitespace are tolerated") {
    const ExperimentConfig cfg = parse_config_text(
        "# leading comment\n"
        "\n"
        "  train.seed = 7   # trailing comment\n"
        "\tdata.seed\t=\t8\n"
        "model.image_size=16  # small\n"
        "model.patch_size=4\n"
        "model.embed_dim=8\n"
        "model.num_heads=2\n");
    CHECK(cfg.train.seed == 7);
    CHECK(cfg.data.seed == 8);
    CHECK(cfg.model.image_size == 16);
}

TEST_CASE("malformed configs are rejected with the offending key") {
    CHECK_THROWS_AS(parse_config_text("train.seed=1\ndata.seed=2\ntrain.seed=3\n"),
                    std::invalid_argument);
    CHECK_THROWS_AS(parse_config_text("train.seed=1\ndata.seed=2\nmodel.width=3\n"),
                    std::invalid_argument);
    CHECK_THROWS_AS(parse_config_text("train.seed=1\ndata.seed=2\njust a line\n"),
                    std::invalid_argument);
    CHECK_THROWS_AS(parse_config_text("data.seed=2\n"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config_text("train.seed=1\n"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config_text(""), std::invalid_argument);

    try {
        parse_config_text("train.seed=1\ndata.seed=2\ntrain.lr0=fast\n");
        FAIL("expected a parse error");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("train.lr0") != std::string::npos);
    }
}

TEST_CASE("typed values are parsed strictly") {
    CHECK_THROWS_AS(parse_config_text("train.seed=1\ndata.seed=2\nmodel.image_size=16x\n"),
                    std::invalid_argument);
    CHECK_THROWS_AS(parse_config_text("train.seed=1\ndata.seed=2\naug.weak=1\n"),
                    std::invalid_argument);
    CHECK_THROWS_AS(parse_config_text("train.seed=1\ndata.seed=2\naug.weak=yes\n"),
                    std::invalid_argument);
    CHECK_THROWS_AS(parse_config_text("train.seed=-1\ndata.seed=2\n"), std::invalid_argument);
    const ExperimentConfig cfg =
        parse_config_text("train.seed=1\ndata.seed=2\naug.weak=false\naug.strong=true\n");
    CHECK_FALSE(cfg.aug.weak);
    CHECK(cfg.aug.strong);
}

TEST_CASE("train.mode selects between semi and sup_only") {
    CHECK_FALSE(parse_config_text("train.seed=1\ndata.seed=2\ntrain.mode=semi\n").train.sup_only);
    CHECK(parse_config_text("train.seed=1\ndata.seed=2\ntrain.mode=sup_only\n").train.sup_only);
    CHECK_THROWS_AS(parse_config_text("train.seed=1\ndata.seed=2\ntrain.mode=full\n"),
                    std::invalid_argument);
}

TEST_CASE("parsing validates the assembled config") {
    // 30 is not divisible by the default patch size 8.
    CHECK_THROWS_AS(parse_config_text("train.seed=1\ndata.seed=2\nmodel.image_size=30\n"),
                    std::invalid_argument);
    CHECK_THROWS_AS(parse_config_text("train.seed=1\ndata.seed=2\ntrain.branch=D9\n"),
                    std::invalid_argument);
    CHECK_THROWS_AS(parse_config_text("train.seed=1\ndata.seed=2\ntrain.rho=1.5\n"),
                    std::invalid_argument);
    CHECK_THROWS_AS(parse_config_text("train.seed=1\ndata.seed=2\naug.baseline=mixup\n"),
                    std::invalid_argument);
}

TEST_CASE("configs load from files") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "tokenseg_cfg_test";
    fs::create_directories(dir);
    const fs::path path = dir / "config.txt";
    const ExperimentConfig cfg = fancy_config();
    {
        std::ofstream out(path);
        out << serialize_config(cfg);
    }
    CHECK(parse_config(path.string()) == cfg);
    CHECK_THROWS_AS(parse_config((dir / "missing.txt").string()), std::runtime_error);
    fs::remove_all(dir);
}
