#include <doctest.h>

#include <cmath>
#include <set>

#include "ett/eval.hpp"
#include "ett/image_io.hpp"
#include "ett/pipeline.hpp"
#include "ett/verifier.hpp"
#include "support/temp_dir.hpp"

using namespace ett;
using testing::TempDir;

TEST_CASE("samples are a pure function of seed and index") {
    for (std::uint64_t i : {0ull, 7ull, 4321ull}) {
        const Sample a = generate_sample(11, i);
        const Sample b = generate_sample(11, i);
        CHECK(a.image == b.image);
        CHECK(a.caption == b.caption);
        CHECK(a.scene == b.scene);
        CHECK(a.image.height == kImageSize);
        CHECK(a.image.width == kImageSize);
    }
    CHECK(generate_sample(11, 3).caption == Corpus(11, 10).caption(3));
}

TEST_CASE("a white square on black covers exactly side^2 pixels at +1") {
    for (SizeKind size : {SizeKind::small, SizeKind::large}) {
        for (int cell : {0, 4, 8}) {
            SceneSpec s;
            s.background = 0;
            REQUIRE(background_level(0) == -1.0f);
            s.objects.push_back({ShapeKind::square, Color::white, cell, size});
            const Image img = render_scene(s);
            const int side = size_pixels(size);
            int on = 0, off = 0;
            for (float v : img.pixels) {
                if (v == 1.0f) ++on;
                else if (v == -1.0f) ++off;
            }
            CHECK(on == side * side * 3);
            CHECK(on + off == static_cast<int>(img.pixels.size()));
            // Every lit pixel lies inside the object's cell.
            const int r0 = kCellOrigin + kCellPixels * (cell / 3), c0 = kCellOrigin + kCellPixels * (cell % 3);
            for (int y = 0; y < img.height; ++y) {
                for (int x = 0; x < img.width; ++x) {
                    if (img.at(y, x, 0) == 1.0f) {
                        CHECK(y >= r0);
                        CHECK(y < r0 + kCellPixels);
                        CHECK(x >= c0);
                        CHECK(x < c0 + kCellPixels);
                    }
                }
            }
        }
    }
}

TEST_CASE("captions of 10^4 samples parse back to their scenes") {
    const Corpus corpus(3, 10000);
    std::int64_t failures = 0;
    for (std::uint64_t i = 0; i < corpus.size(); ++i) {
        const auto parsed = parse_caption(corpus.caption(i));
        if (!parsed || *parsed != corpus.scene(i)) ++failures;
    }
    CHECK(failures == 0);
    CHECK_FALSE(parse_caption("a purple hexagon").has_value());
}

TEST_CASE("scene invariants and split disjointness") {
    const Corpus corpus(5, 5000);
    std::set<std::string> train, eval;
    for (std::uint64_t i = 0; i < corpus.size(); ++i) {
        const SceneSpec& s = corpus.scene(i);
        REQUIRE(s.objects.size() >= 1);
        REQUIRE(s.objects.size() <= 3);
        for (std::size_t j = 1; j < s.objects.size(); ++j) CHECK(s.objects[j - 1].cell < s.objects[j].cell);
    }
    for (auto i : corpus.train_indices()) train.insert(corpus.caption(i));
    for (auto i : corpus.eval_indices()) eval.insert(corpus.caption(i));
    std::int64_t shared = 0;
    for (const auto& c : eval) shared += train.count(c);
    CHECK(shared == 0);
    CHECK(corpus.train_indices().size() + corpus.eval_indices().size() == corpus.size());
    CHECK_FALSE(corpus.eval_indices().empty());
}

TEST_CASE("corpus files round trip") {
    TempDir tmp;
    const Corpus a(9, 200);
    a.write(tmp.str());
    const Corpus b = Corpus::load(tmp.str());
    CHECK(b.size() == a.size());
    CHECK(b.seed() == a.seed());
    CHECK(b.train_indices() == a.train_indices());
    for (std::uint64_t i = 0; i < a.size(); ++i) CHECK(b.caption(i) == a.caption(i));
}

TEST_CASE("psnr from mse") {
    CHECK(std::isinf(psnr_from_mse(0)));
    CHECK(psnr_from_mse(0) > 0);
    CHECK(psnr_from_mse(4) == doctest::Approx(0));
    CHECK(psnr_from_mse(0.04) == doctest::Approx(20));
    const Image hi = Image::filled(4, 4, 1.0f), lo = Image::filled(4, 4, -1.0f);
    CHECK(image_mse(hi, lo) == 4);
    CHECK(image_mse(hi, hi) == 0);
    EvalReport r;
    r.recon = ReconMetrics{0, psnr_from_mse(0), 1};
    CHECK(report_json(r).find("\"inf\"") != std::string::npos);
}

TEST_CASE("geneval-lite is exact on ground truth and zero on blanks") {
    const Corpus corpus(0, 4000);
    const auto prompts = geneval_prompts(corpus, 200);
    REQUIRE(prompts.size() == 200);
    std::vector<Image> truth, blank;
    for (const auto& p : prompts) {
        truth.push_back(render_scene(p));
        blank.push_back(Image::filled(kImageSize, kImageSize, background_level(p.background)));
    }
    const GenevalScores good = score_images(prompts, truth);
    CHECK(good.overall == 1.0);
    for (std::size_t c = 0; c < 4; ++c) {
        CHECK(good.prompts[c] > 0);
        CHECK(good.accuracy[c] == 1.0);
    }
    CHECK(score_images(prompts, blank).overall == 0.0);
}

TEST_CASE("the verifier rejects wrong colors, cells and counts") {
    SceneSpec p;
    p.objects = {{ShapeKind::circle, Color::red, 0, SizeKind::large}, {ShapeKind::square, Color::blue, 4, SizeKind::small}};
    SceneSpec wrong_color = p, wrong_cell = p, missing = p;
    wrong_color.objects[0].color = Color::green;
    wrong_cell.objects[1].cell = 5;
    missing.objects.pop_back();
    const auto score = [&](const SceneSpec& drawn) {
        const auto det = detect_objects(render_scene(drawn));
        return verify_prompt(p, det).passed;
    };
    const auto ok = score(p);
    for (auto v : ok) CHECK((!v || *v));
    CHECK(*score(wrong_color)[2] == false);
    CHECK(*score(wrong_cell)[3] == false);
    CHECK(*score(missing)[1] == false);
}

TEST_CASE("image files round trip") {
    TempDir tmp;
    std::vector<Image> imgs = {render_scene(generate_sample(1, 0).scene), render_scene(generate_sample(1, 1).scene)};
    write_image_stack(tmp / "s.bin", imgs);
    CHECK(read_images(tmp / "s.bin") == imgs);
    write_png(tmp / "a.png", imgs[0]);
    const Image back = read_png(tmp / "a.png");
    CHECK(image_mse(back, imgs[0]) < 1e-4);  // 8-bit quantization
    CHECK(read_images(tmp / "a.png").size() == 1);
    CHECK_THROWS(read_images(tmp / "missing.bin"));
}

TEST_CASE("evaluation on an empty split is an error") {
    Settings s = default_settings();
    s.set("data.count", "16");
    const RunConfig cfg = make_run_config(s);
    const TrainingData data = load_training_data(cfg);
    EttModel model(cfg.model, data.vocab, 0);
    CHECK_THROWS_AS(recon_metrics(model, data.corpus, {}), Error);
    CHECK_THROWS_AS(caption_eval(model, data.corpus, data.vocab, {}, 0), Error);
}

TEST_CASE("an untrained model captions at chance") {
    Settings s = default_settings();
    s.set("data.count", "400");
    const RunConfig cfg = make_run_config(s);
    const TrainingData data = load_training_data(cfg);
    EttModel model(cfg.model, data.vocab, 0);
    const auto m = caption_eval(model, data.corpus, data.vocab, data.corpus.eval_indices(), 5);
    const double chance = 1.0 / static_cast<double>(data.vocab.size());
    const double sigma = std::sqrt(chance * (1 - chance) / static_cast<double>(m.tokens));
    INFO("accuracy " << m.token_accuracy << " over " << m.tokens << " tokens, chance " << chance);
    CHECK(std::abs(m.token_accuracy - chance) <= 3 * sigma);
    CHECK(m.exact_match == 0);
    CHECK(m.exact_captions == 5);
}
