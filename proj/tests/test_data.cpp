#include "test_support.hpp"

#include <filesystem>
#include <fstream>
#include <set>

#include "memwarp/data.hpp"
#include "memwarp/fieldops.hpp"
#include "memwarp/network.hpp"
#include "memwarp/volume_io.hpp"

using namespace memwarp;
namespace fs = std::filesystem;
namespace dt = memwarp::data;

namespace {

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("memwarp_test_data_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

int64_t count(const LabelVolume& v, int label) {
    return v.labels.eq(label).sum().item<int64_t>();
}

} // namespace

TEST_CASE("phantom spec validation and json") {
    dt::PhantomSpec spec;
    CHECK_NOTHROW(spec.validate());
    spec.max_displacement = 2.0; // min dim 8 -> bound 2, exclusive
    CHECK_THROWS_AS(spec.validate(), ConfigError);
    spec.max_displacement = -0.1;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
    spec = {};
    spec.rv_radius = 12.0;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
    spec = {};
    spec.lvbp_radius = 0.0;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
    spec = {};
    spec.lvbp_radius = 2.0; // the blood pool would vanish at end-systole
    CHECK_THROWS_AS(spec.validate(), ConfigError);

    spec = {};
    spec.seed = 99;
    spec.noise_sigma = 0.05;
    auto back = dt::PhantomSpec::from_json(spec.to_json());
    CHECK(back.to_json() == spec.to_json());
    CHECK(back.seed == 99);
    // The generator's displacement bound fits the desk network depth.
    CHECK(network::min_pyramid_levels(dt::PhantomSpec{}.max_displacement) <= 3);
}

TEST_CASE("phantom pairs are deterministic") {
    const dt::PhantomSpec spec;
    auto a = dt::generate_phantom_pair(spec, 5);
    auto b = dt::generate_phantom_pair(spec, 5);
    CHECK(torch::equal(a.moving.data, b.moving.data));
    CHECK(torch::equal(a.fixed.data, b.fixed.data));
    CHECK(torch::equal(a.moving_mask.labels, b.moving_mask.labels));
    CHECK(torch::equal(a.ground_truth->vectors, b.ground_truth->vectors));
    auto c = dt::generate_phantom_pair(spec, 6);
    CHECK_FALSE(torch::equal(a.moving.data, c.moving.data));
    CHECK(a.pair_id == "phantom_ed2es");
    CHECK(a.moving.shape().same_dims(a.fixed_mask.shape()));
    CHECK(a.moving_mask.num_classes == 4);
}

TEST_CASE("zero amplitude gives identical phases") {
    dt::PhantomSpec spec;
    spec.max_displacement = 0.0;
    auto s = dt::generate_phantom_subject(spec, 3, "still", /*noise=*/false);
    CHECK(torch::equal(s.ed.data, s.es.data));
    CHECK(torch::equal(s.ed_seg.labels, s.es_seg.labels));
    CHECK(s.ed_to_es.vectors.count_nonzero().item<int64_t>() == 0);
    CHECK(s.es_to_ed.vectors.count_nonzero().item<int64_t>() == 0);
}

TEST_CASE("phantom anatomy and ground-truth field") {
    const dt::PhantomSpec spec;
    for (uint64_t seed : {1u, 2u, 3u, 4u}) {
        auto s = dt::generate_phantom_subject(spec, seed, "s");
        // Blood pool shrinks and myocardium thickens from ED to ES.
        CHECK(count(s.es_seg, 3) < count(s.ed_seg, 3));
        CHECK(count(s.es_seg, 2) > count(s.ed_seg, 2));
        for (int k = 0; k < 4; ++k) {
            CHECK(count(s.ed_seg, k) > 0);
        }
        CHECK(s.ed.data.min().item<double>() >= 0.0);
        CHECK(s.ed.data.max().item<double>() <= 1.0);
        // |u| <= d_max per voxel.
        for (const auto* f : {&s.ed_to_es, &s.es_to_ed}) {
            const double mag = f->vectors.pow(2).sum(0).sqrt().max().item<double>();
            CHECK(mag <= spec.max_displacement + 1e-5);
        }
        for (const auto* f : {&s.ed_to_es, &s.es_to_ed}) {
            auto det = fieldops::jacobian_determinant(*f);
            CHECK(det.min().item<double>() > 0.0);
        }
        // Pulling the moving image through the ground truth reaches the
        // fixed image up to twice the noise floor.
        const double floor2 = 2.0 * spec.noise_sigma * spec.noise_sigma;
        for (auto d : {dt::Direction::ed_to_es, dt::Direction::es_to_ed}) {
            auto p = s.pair(d);
            auto warped = fieldops::warp(p.moving, *p.ground_truth).data;
            const double mse = (warped - p.fixed.data).pow(2).mean().item<double>();
            CHECK_MESSAGE(mse < floor2, dt::to_string(d) << " mse " << mse);
            const double before = (p.moving.data - p.fixed.data).pow(2).mean().item<double>();
            CHECK(mse < before);
        }
        // Masks agree with intensities: every class is brighter or darker on average as specified.
        auto clean = dt::generate_phantom_subject(spec, seed, "s", false);
        std::vector<double> means;
        for (int k = 0; k < 4; ++k) {
            means.push_back(clean.ed.data.masked_select(clean.ed_seg.labels.eq(k)).mean().item<double>());
        }
        CHECK(means[0] < means[2]);
        CHECK(means[2] < means[1]);
        CHECK(means[1] < means[3]);
    }
}

TEST_CASE("preprocess") {
    SUBCASE("min-max normalisation") {
        auto t = torch::full({4, 4, 2}, 2.0f);
        t[0][0][0] = 6.0f;
        t[1][2][1] = 4.0f;
        auto out = dt::preprocess(ImageVolume{t, {1, 1, 1}}, {1, 1, 1}, {4, 4, 2});
        CHECK(out.data[0][0][0].item<double>() == 1.0);
        CHECK(out.data[3][3][1].item<double>() == 0.0);
        CHECK(out.data[1][2][1].item<double>() == doctest::Approx(0.5));
        CHECK_THROWS_AS(dt::normalize(ImageVolume{torch::full({3, 3, 3}, 0.4f)}), DataError);
    }
    SUBCASE("conforming input is unchanged up to normalisation and the step is idempotent") {
        auto p = dt::generate_phantom_pair(dt::PhantomSpec{}, 9);
        auto once = dt::preprocess(p.moving, {1.8, 1.8, 10}, {32, 32, 8});
        CHECK((once.data - dt::normalize(p.moving).data).abs().max().item<double>() < 1e-6);
        auto twice = dt::preprocess(once, {1.8, 1.8, 10}, {32, 32, 8});
        CHECK((twice.data - once.data).abs().max().item<double>() < 1e-6);
    }
    SUBCASE("resampling and crop/pad reach the target geometry") {
        torch::manual_seed(50);
        const ImageVolume raw{torch::rand({150, 140, 9}), {1.25, 1.25, 16.0}};
        auto out = dt::preprocess(raw, {1.8, 1.8, 10.0}, {128, 128, 16});
        CHECK(out.data.sizes() == torch::IntArrayRef({128, 128, 16}));
        CHECK((out.spacing == Spacing{1.8, 1.8, 10.0}));
        CHECK(out.data.min().item<double>() >= 0.0);
        CHECK(out.data.max().item<double>() <= 1.0);
        auto lab = dt::preprocess_labels(LabelVolume{torch::randint(0, 4, {150, 140, 9}, torch::kInt64), 4, raw.spacing},
                                         {1.8, 1.8, 10.0}, {128, 128, 16});
        CHECK(lab.labels.sizes() == torch::IntArrayRef({128, 128, 16}));
        CHECK((lab.labels.scalar_type() == torch::kInt64));
        CHECK(lab.labels.max().item<int64_t>() <= 3);
    }
    SUBCASE("a shift-free centred crop keeps the middle") {
        auto t = torch::arange(6 * 6 * 4, torch::kFloat32).view({6, 6, 4});
        auto out = dt::preprocess(ImageVolume{t}, {1, 1, 1}, {4, 4, 2});
        auto mid = dt::normalize(ImageVolume{t}).data.narrow(0, 1, 4).narrow(1, 1, 4).narrow(2, 1, 2);
        // Normalised over the cropped range, so compare after renormalising.
        CHECK((out.data - dt::normalize(ImageVolume{mid}).data).abs().max().item<double>() < 1e-6);
    }
}

TEST_CASE("split_cohort") {
    std::vector<dt::CohortEntry> pairs;
    for (int s = 0; s < 10; ++s) {
        const auto id = "s" + std::to_string(s);
        pairs.push_back({dt::pair_id(id, dt::Direction::ed_to_es), id, s * 0.1});
        pairs.push_back({dt::pair_id(id, dt::Direction::es_to_ed), id, s * 0.1});
    }
    auto split = dt::split_cohort(pairs, {0.6, 0.2, 0.2}, 1);
    CHECK(split.train.size() == 12);
    CHECK(split.val.size() == 4);
    CHECK(split.test.size() == 4);
    auto subjects = [](const std::vector<std::string>& ids) {
        std::set<std::string> out;
        for (const auto& p : ids) {
            out.insert(p.substr(0, p.rfind('_')));
        }
        return out;
    };
    const auto tr = subjects(split.train), va = subjects(split.val), te = subjects(split.test);
    CHECK(tr.size() == 6);
    CHECK(va.size() == 2);
    CHECK(te.size() == 2);
    std::set<std::string> all(tr);
    all.insert(va.begin(), va.end());
    all.insert(te.begin(), te.end());
    CHECK(all.size() == 10);

    auto again = dt::split_cohort(pairs, {0.6, 0.2, 0.2}, 1);
    CHECK(again.train == split.train);
    CHECK(again.test == split.test);
    CHECK_THROWS_AS(dt::split_cohort(pairs, {0.6, 0.2, 0.3}, 1), ConfigError);
    CHECK_THROWS_AS(dt::split_cohort({pairs[0], pairs[1]}, {0.6, 0.2, 0.2}, 1), DataError);
}

TEST_CASE("volume io round trips") {
    const auto dir = scratch("io");
    torch::manual_seed(51);
    const ImageVolume img{torch::rand({7, 6, 5}), {1.8, 1.8, 10.0}};
    const LabelVolume lab{torch::randint(0, 4, {7, 6, 5}, torch::kInt64), 4, {1.8, 1.8, 10.0}};
    const DisplacementField field{torch::randn({3, 7, 6, 5})};
    for (const std::string ext : {".nii", ".nii.gz", ".mwv"}) {
        CAPTURE(ext);
        io::write_volume(img, dir / ("img" + ext));
        auto img2 = io::read_image(dir / ("img" + ext));
        CHECK(torch::equal(img2.data, img.data));
        CHECK((img2.spacing == img.spacing));

        io::write_volume(lab, dir / ("lab" + ext));
        auto any = io::read_volume(dir / ("lab" + ext));
        REQUIRE(std::holds_alternative<LabelVolume>(any));
        auto lab2 = std::get<LabelVolume>(any);
        CHECK((lab2.labels.scalar_type() == torch::kInt64));
        CHECK(torch::equal(lab2.labels, lab.labels));
        CHECK((lab2.spacing == lab.spacing));

        io::write_field(field, dir / ("field" + ext));
        auto any_field = io::read_volume(dir / ("field" + ext));
        REQUIRE(std::holds_alternative<DisplacementField>(any_field));
        CHECK(torch::equal(std::get<DisplacementField>(any_field).vectors, field.vectors));
    }
    std::ofstream(dir / "junk.nii") << "not a volume";
    CHECK_THROWS_AS(io::read_volume(dir / "junk.nii"), DataError);
    CHECK_THROWS_AS(io::read_volume(dir / "missing.nii.gz"), DataError);
    CHECK_THROWS_AS(io::read_volume(dir / "img.txt"), DataError);
    fs::remove_all(dir);
}

TEST_CASE("on-disk dataset, manifest and mask accounting") {
    const auto dir = scratch("ds");
    dt::PhantomSpec spec;
    spec.seed = 11;
    auto manifest = dt::write_phantom_dataset(spec, 10, dir);
    CHECK(manifest.subjects.size() == 10);
    CHECK(manifest.subjects_in("train").size() == 6);
    CHECK(manifest.subjects_in("test").size() == 2);
    for (const char* f : {"ed_img.nii.gz", "es_img.nii.gz", "ed_seg.nii.gz", "es_seg.nii.gz", "ed_to_es_field.nii.gz",
                          "es_to_ed_field.nii.gz"}) {
        CHECK(fs::exists(dir / "subject_000" / f));
    }
    auto read = dt::read_manifest(dir);
    CHECK(read.to_json() == manifest.to_json());
    CHECK(read.to_json()["class_names"][3].get<std::string>() == "LVBP");

    const auto before = dt::mask_reads().load();
    dt::Dataset images_only(dir, false);
    CHECK(dt::mask_reads().load() == before);
    const auto pairs = images_only.pairs("val");
    REQUIRE(pairs.size() == 4);
    CHECK(images_only.moving(pairs[0]).data.sizes() == torch::IntArrayRef({32, 32, 8}));
    CHECK(torch::equal(images_only.moving(pairs[0]).data, images_only.fixed(pairs[1]).data));
    CHECK_THROWS_AS(images_only.moving_mask(pairs[0]), ContractError);
    CHECK_THROWS_AS(images_only.moving(std::string("nobody_ed2es")), DataError);
    CHECK(dt::mask_reads().load() == before);

    dt::Dataset with_masks(dir, true);
    CHECK(dt::mask_reads().load() == before + 20);
    CHECK(with_masks.moving_mask(pairs[0]).num_classes == 4);
    CHECK(dt::mask_reads().load() == before + 21);

    // Regenerating with the same spec writes the same bytes.
    const auto dir2 = scratch("ds2");
    dt::write_phantom_dataset(spec, 10, dir2);
    auto slurp = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(in), {});
    };
    CHECK(slurp(dir / "subject_004" / "es_img.nii.gz") == slurp(dir2 / "subject_004" / "es_img.nii.gz"));
    CHECK(slurp(dir / "manifest.json") == slurp(dir2 / "manifest.json"));
    fs::remove_all(dir);
    fs::remove_all(dir2);
}
