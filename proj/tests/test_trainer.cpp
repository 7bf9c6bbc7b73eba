#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "gram/checkpoint.hpp"
#include "gram/error.hpp"
#include "gram/trainer.hpp"

using namespace gram;

namespace {

std::string scratch(const std::string& name) {
    static const std::filesystem::path dir = [] {
        std::filesystem::path p = "trainer_scratch";
        std::filesystem::create_directories(p);
        return p;
    }();
    return (dir / name).string();
}

// Smallest geometry the model config accepts; seconds per full run.
TrainConfig tiny_cfg(const std::string& out) {
    TrainConfig cfg;
    cfg.data = "blobs";
    cfg.classes = 3;
    cfg.limit = 48;
    cfg.val_limit = 24;
    cfg.depth = 8;
    cfg.stem = 4;
    cfg.channels = {4, 4, 8};
    cfg.heads = 2;
    cfg.epochs = 2;
    cfg.batch = 16;
    cfg.milestones = {};
    cfg.out_dir = scratch(out);
    return cfg;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("defaults validate and map onto a model config") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    auto mc = model_config(cfg);
    CHECK(mc.backbone.depth == 20);
    CHECK(mc.head.in_channels == 64);
    CHECK(mc.head.reduced == 64);  // reduced=0 borrows the final width
    CHECK(mc.head.classes == 10);
    CHECK(mc.num_heads == 5);

    cfg.reduced = 32;
    CHECK(model_config(cfg).head.reduced == 32);
}

TEST_CASE("config rejections name the offense") {
    auto bad = [](const std::function<void(TrainConfig&)>& f) {
        TrainConfig cfg;
        f(cfg);
        CHECK_THROWS_AS(cfg.validate(), ConfigError);
    };
    bad([](TrainConfig& c) { c.data = "imagenet"; });
    bad([](TrainConfig& c) { c.data = "cifar10"; c.classes = 5; });
    bad([](TrainConfig& c) { c.data = "cifar10"; });  // no train_files
    bad([](TrainConfig& c) { c.classes = 1; });
    bad([](TrainConfig& c) { c.epochs = 0; });
    bad([](TrainConfig& c) { c.batch = 0; });
    bad([](TrainConfig& c) { c.eval_every = 0; });
    bad([](TrainConfig& c) { c.schedule = "linear"; });
    bad([](TrainConfig& c) { c.milestones = {200, 100}; });
    bad([](TrainConfig& c) { c.lr = 0; });
    bad([](TrainConfig& c) { c.head = "transformer"; });
    bad([](TrainConfig& c) { c.heads = 0; });
    bad([](TrainConfig& c) { c.texture_cue = 0; });
    bad([](TrainConfig& c) { c.texture_cue = -0.1; });
}

TEST_CASE("step schedule worked values") {
    TrainConfig cfg;  // lr 1e-3, factor 0.1, milestones 150/225
    CHECK(lr_at(cfg, 0) == doctest::Approx(1e-3).epsilon(1e-12));
    CHECK(lr_at(cfg, 149) == doctest::Approx(1e-3).epsilon(1e-12));
    CHECK(lr_at(cfg, 150) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(lr_at(cfg, 224) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(lr_at(cfg, 225) == doctest::Approx(1e-5).epsilon(1e-12));
    CHECK(lr_at(cfg, 299) == doctest::Approx(1e-5).epsilon(1e-12));

    cfg.schedule = "cosine";
    CHECK(lr_at(cfg, 0) == doctest::Approx(1e-3).epsilon(1e-12));
    CHECK(lr_at(cfg, 150) == doctest::Approx(5e-4).epsilon(1e-12));  // halfway point
    CHECK(lr_at(cfg, 299) < 1e-7);
}

TEST_CASE("desk profile narrows the run") {
    auto cfg = desk_profile();
    CHECK(cfg.epochs == 60);
    CHECK(cfg.limit == 5000);
    CHECK(cfg.val_limit == 1000);
    CHECK(cfg.stem == 8);
    CHECK(cfg.channels == std::array<size_t, 3>{8, 16, 32});
    CHECK(cfg.milestones == std::vector<size_t>{30, 45});
    CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("config text parses with comments and lists") {
    auto cfg = parse_config_text(
        "# run description\n"
        "depth = 14   # inline comment\n"
        "channels = 4, 8, 12\n"
        "milestones = 10,20\n"
        "head = gap_fc\n"
        "lambda = -0.4\n"
        "\n"
        "augment = 0\n");
    CHECK(cfg.depth == 14);
    CHECK(cfg.channels == std::array<size_t, 3>{4, 8, 12});
    CHECK(cfg.milestones == std::vector<size_t>{10, 20});
    CHECK(cfg.head == "gap_fc");
    CHECK(cfg.lambda == -0.4);
    CHECK(cfg.augment == false);

    CHECK_THROWS_WITH_AS(parse_config_text("depth = 8\nwat = 1\n"),
                         doctest::Contains("unknown key 'wat'"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config_text("depth = 8\njust words\n"),
                         doctest::Contains("config line 2"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config_text("depth = abc\n"),
                         doctest::Contains("unsigned integer"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config_text("lambda = abc\n"),
                         doctest::Contains("wants a number"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("channels = 4, 8\n"), ConfigError);

    TrainConfig cfg2;
    apply_override(cfg2, "epochs", "12");
    CHECK(cfg2.epochs == 12);
    CHECK_THROWS_AS(apply_override(cfg2, "banana", "1"), ConfigError);
}

TEST_CASE("config files round trip through load_config") {
    const auto path = scratch("roundtrip.cfg");
    write_text_file(path, "depth = 8\nstem = 4\nchannels = 4,4,8\nclasses = 3\ndata = blobs\n"
                          "texture_cue = 0.25\n");
    auto cfg = load_config(path);
    CHECK(cfg.depth == 8);
    CHECK(cfg.data == "blobs");
    CHECK(cfg.texture_cue == 0.25);
    CHECK_NOTHROW(cfg.validate());

    // the writer emits exactly what the parser accepts
    auto again = parse_config_text(format_config(cfg));
    CHECK(format_config(again) == format_config(cfg));
}

TEST_CASE("synthetic split assembly balances classes") {
    auto cfg = tiny_cfg("unused_split");
    cfg.data = "textures";
    cfg.limit = 10;  // not divisible by 3 classes
    auto train_set = make_train_dataset(cfg);
    CHECK(train_set.size() == 10);
    std::vector<int> counts(3, 0);
    for (int l : train_set.labels) ++counts[size_t(l)];
    CHECK(counts == std::vector<int>{4, 3, 3});  // round robin keeps balance

    // first examples cycle through the classes
    CHECK(train_set.labels[0] == 0);
    CHECK(train_set.labels[1] == 1);
    CHECK(train_set.labels[2] == 2);
    CHECK(train_set.labels[3] == 0);

    auto val_set = make_val_dataset(cfg);
    CHECK(val_set.size() == cfg.val_limit);
    CHECK(val_set.images != train_set.images);  // decorrelated generator keys

    // same config draws the same data
    CHECK(make_train_dataset(cfg).images == train_set.images);
}

TEST_CASE("evaluation gates diagnostics on head count") {
    auto cfg = tiny_cfg("unused_eval");
    auto data = make_val_dataset(cfg);

    auto mc = model_config(cfg);
    auto model = build_model<float>(mc, 5);
    // prime running stats; evaluation refuses eval-mode batch norm without them
    auto batch = gather_batch(data, {0, 1, 2, 3}, false, 0);
    Tape tape;
    forward_all(model, batch, BnMode::train, &tape);

    auto ev = evaluate_model(model, data, 8, -0.8);
    CHECK(ev.per_head_top1.size() == 2);
    CHECK(ev.diag_valid);
    CHECK(ev.top1 >= 0.0);
    CHECK(ev.top1 <= 1.0);
    CHECK(std::isfinite(ev.ce));
    CHECK(std::isfinite(ev.dec));

    mc.num_heads = 1;
    auto solo = build_model<float>(mc, 5);
    forward_all(solo, batch, BnMode::train, &tape);
    auto ev1 = evaluate_model(solo, data, 8, 0.0);
    CHECK_FALSE(ev1.diag_valid);
    CHECK(ev1.dec == 0.0);

    CHECK_THROWS_AS(evaluate_model(model, Dataset{}, 8, 0.0), ConfigError);
    CHECK_THROWS_AS(evaluate_model(model, data, 0, 0.0), ConfigError);
}

TEST_CASE("gradient clipping is inert until the cap binds") {
    auto plain = tiny_cfg("run_clip_off");
    auto slack = tiny_cfg("run_clip_slack");
    slack.clip_norm = 1e9;  // far above any real step
    auto rp = train(plain);
    auto rs = train(slack);
    CHECK(read_text_file(rp.metrics_path) == read_text_file(rs.metrics_path));
    CHECK(read_text_file(rp.final_ckpt) == read_text_file(rs.final_ckpt));

    auto tight = tiny_cfg("run_clip_tight");
    tight.clip_norm = 1e-3;  // every step hits the cap
    auto rt = train(tight);
    CHECK(read_text_file(rp.metrics_path) != read_text_file(rt.metrics_path));

    auto bad = tiny_cfg("run_clip_bad");
    bad.clip_norm = -1;
    CHECK_THROWS_WITH_AS(bad.validate(), "config: clip_norm must be zero or positive",
                         ConfigError);
}

TEST_CASE("identical configs reproduce metrics and checkpoints byte for byte") {
    auto a = tiny_cfg("run_det_a");
    auto b = tiny_cfg("run_det_b");
    auto ra = train(a);
    auto rb = train(b);

    CHECK(read_text_file(ra.metrics_path) == read_text_file(rb.metrics_path));
    CHECK(read_text_file(ra.final_ckpt) == read_text_file(rb.final_ckpt));
    CHECK(ra.final_top1 == rb.final_top1);

    // a different seed actually changes the run
    auto c = tiny_cfg("run_det_c");
    c.seed = 2;
    auto rc = train(c);
    CHECK(read_text_file(ra.metrics_path) != read_text_file(rc.metrics_path));
}

TEST_CASE("loss falls and accuracy beats chance on easy blobs") {
    auto cfg = tiny_cfg("run_descent");
    cfg.epochs = 6;
    cfg.limit = 60;
    cfg.lr = 0.01;
    cfg.augment = false;
    auto res = train(cfg);

    double first_ce = 0, last_ce = 0, last_top1 = 0;
    bool saw_first = false;
    for (const auto& row : res.history) {
        if (row.split != "train") continue;
        if (!saw_first) {
            first_ce = row.loss_ce;
            saw_first = true;
        }
        last_ce = row.loss_ce;
        last_top1 = row.top1;
    }
    REQUIRE(saw_first);
    CHECK(last_ce < first_ce);
    CHECK(last_top1 > 0.5);  // chance is 1/3

    // metrics file reflects the recorded history
    auto rows = parse_metrics(read_text_file(res.metrics_path));
    CHECK(rows.size() == res.history.size());
    CHECK(std::filesystem::exists(res.final_ckpt));
    CHECK(std::filesystem::exists(res.best_ckpt));
}

TEST_CASE("resuming from the midpoint reproduces the uninterrupted run") {
    auto full = tiny_cfg("run_full");
    full.epochs = 4;
    auto rfull = train(full);

    auto half = tiny_cfg("run_half");
    half.epochs = 2;
    auto rhalf = train(half);

    auto tail = tiny_cfg("run_resumed");
    tail.epochs = 4;
    auto rtail = train(tail, rhalf.final_ckpt);

    CHECK(read_text_file(rfull.metrics_path) == read_text_file(rtail.metrics_path));
    CHECK(read_text_file(rfull.final_ckpt) == read_text_file(rtail.final_ckpt));
    CHECK(rfull.final_top1 == rtail.final_top1);
    CHECK(rfull.best_epoch == rtail.best_epoch);
}

TEST_CASE("resume refuses stale or mismatched checkpoints") {
    auto done = tiny_cfg("run_done");
    auto rdone = train(done);  // 2 epochs, checkpoint covers the whole request
    CHECK_THROWS_WITH_AS(train(done, rdone.final_ckpt), doctest::Contains("already covers"),
                         ConfigError);

    auto other = tiny_cfg("run_other_shape");
    other.heads = 3;
    CHECK_THROWS_WITH_AS(train(other, rdone.final_ckpt), doctest::Contains("geometry"),
                         ConfigError);
}

TEST_CASE("sweep writes one row per value and survives failures") {
    auto base = tiny_cfg("sweep_base");
    base.epochs = 1;
    base.limit = 24;
    base.val_limit = 12;
    const auto csv_path = scratch("sweep.csv");

    auto rows = sweep(base, "lambda", {0.0, -0.8}, csv_path);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].ok);
    CHECK(rows[1].ok);
    CHECK(rows[0].value == 0.0);
    CHECK(rows[1].value == -0.8);
    CHECK(std::isfinite(rows[0].top1));

    const std::string csv = read_text_file(csv_path);
    CHECK(csv.rfind("value,top1,strength,rho,bound\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);

    // fractional head counts cannot train; the row records the failure
    auto hrows = sweep(base, "heads", {1.5}, scratch("sweep_bad.csv"));
    REQUIRE(hrows.size() == 1);
    CHECK_FALSE(hrows[0].ok);
    CHECK(hrows[0].error.find("positive integer") != std::string::npos);
    CHECK(std::isnan(hrows[0].top1));

    CHECK_THROWS_AS(sweep(base, "depth", {8}, csv_path), ConfigError);
    CHECK_THROWS_AS(sweep(base, "lambda", {}, csv_path), ConfigError);
}

}  // TEST_SUITE
