#include "testing.h"
#include "fixtures.h"
#include "oracles.h"
#include "retrostory/errors.h"
#include "retrostory/tokenizer.h"
#include "retrostory/training.h"

#include <filesystem>

using namespace retrostory;
using namespace retrostory::tokenizer;

namespace {

torch::Tensor flat_codes(const torch::Tensor& idx) {
  return idx.reshape({-1}).contiguous();
}

}  // namespace

TEST_SUITE("tokenizer") {
  TEST_CASE("quantize agrees with exhaustive search on random instances") {
    auto gen = at::detail::createCPUGenerator(11);
    for (int trial = 0; trial < 50; ++trial) {
      const auto n = 1 + trial % 9, v = 2 + trial % 13, d = 1 + trial % 5;
      const auto z = torch::randn({n, d}, gen);
      const auto e = torch::randn({v, d}, gen);
      const auto got = flat_codes(quantize(z, e));
      const auto want = oracle::nearest_codes(z, e);
      for (std::int64_t i = 0; i < n; ++i) CHECK(got[i].item<std::int64_t>() == want[static_cast<size_t>(i)]);
    }
  }

  TEST_CASE("quantize breaks exact ties toward the lowest index") {
    auto gen = at::detail::createCPUGenerator(12);
    for (int trial = 0; trial < 50; ++trial) {
      // Small integers in double make equal distances common and exact.
      const auto z = torch::randint(-2, 3, {6, 2}, gen).to(torch::kFloat64);
      auto e = torch::randint(-2, 3, {5, 2}, gen).to(torch::kFloat64);
      e[3] = e[1];
      const auto got = flat_codes(quantize(z, e));
      const auto want = oracle::nearest_codes(z, e);
      for (int i = 0; i < 6; ++i) CHECK(got[i].item<std::int64_t>() == want[static_cast<size_t>(i)]);
    }
  }

  TEST_CASE("every codebook entry quantizes to itself") {
    auto gen = at::detail::createCPUGenerator(13);
    const auto e = torch::randn({32, 6}, gen);
    const auto got = quantize(e, e);
    for (std::int64_t k = 0; k < 32; ++k) CHECK(got[k].item<std::int64_t>() == k);
  }

  TEST_CASE("perturbing a latent inside its cell keeps the token") {
    auto gen = at::detail::createCPUGenerator(14);
    const auto e = torch::randn({16, 4}, gen, torch::kFloat64);
    const auto z = torch::randn({64, 4}, gen, torch::kFloat64);
    const auto base = quantize(z, e);
    // Half the margin to the second-nearest entry cannot cross a boundary.
    const auto dist = (z.unsqueeze(1) - e.unsqueeze(0)).square().sum(-1).sqrt();
    const auto sorted = std::get<0>(dist.sort(1));
    const auto margin = (sorted.select(1, 1) - sorted.select(1, 0)) / 2.0;
    auto dir = torch::randn({64, 4}, gen, torch::kFloat64);
    dir = dir / dir.norm(2, 1, true);
    const auto moved = z + dir * (margin * 0.99).unsqueeze(1);
    CHECK(torch::equal(quantize(moved, e), base));
  }

  TEST_CASE("vqvae loss vanishes for perfect reconstruction and codes") {
    const auto img = torch::rand({1, 3, 4, 4});
    const auto lat = torch::randn({1, 2, 2, 3});
    const auto parts = vqvae_loss(img, img, lat, lat, 0.25);
    CHECK(parts.total.item<double>() == 0.0);
  }

  TEST_CASE("vqvae loss matches the one-cell hand computation") {
    // One latent at 1 and its code at 0: codebook term 1, commitment 0.25.
    const auto img = torch::zeros({1, 3, 1, 1});
    const auto lat = torch::ones({1, 1, 1, 1});
    const auto code = torch::zeros({1, 1, 1, 1});
    const auto parts = vqvae_loss(img, img, lat, code, 0.25);
    CHECK(parts.reconstruction.item<double>() == 0.0);
    CHECK(parts.codebook.item<double>() == doctest::Approx(1.0));
    CHECK(parts.commitment.item<double>() == doctest::Approx(0.25));
    CHECK(parts.total.item<double>() == doctest::Approx(1.25));
  }

  TEST_CASE("commitment term sends no gradient to the codebook") {
    const auto lat = torch::randn({1, 2, 2, 3}, torch::requires_grad());
    const auto code = torch::randn({1, 2, 2, 3}, torch::requires_grad());
    const auto img = torch::rand({1, 3, 4, 4});
    vqvae_loss(img, img, lat, code, 0.25).commitment.backward();
    CHECK((!code.grad().defined() || code.grad().abs().max().item<double>() == 0.0));
    CHECK(lat.grad().abs().max().item<double>() > 0.0);
  }

  TEST_CASE("vqvae loss rejects bad input") {
    const auto img = torch::rand({1, 3, 4, 4});
    auto bad = img.clone();
    bad[0][0][0][0] = std::numeric_limits<float>::quiet_NaN();
    const auto lat = torch::randn({1, 2, 2, 3});
    CHECK_THROWS_AS(vqvae_loss(img, bad, lat, lat, 0.25), NumericError);
    CHECK_THROWS_AS(vqvae_loss(img, img, lat, torch::randn({1, 2, 2, 2}), 0.25), ShapeError);
  }

  TEST_CASE("straight-through gradient is the identity") {
    auto gen = at::detail::createCPUGenerator(15);
    const auto e = torch::randn({8, 3}, gen, torch::kFloat64);
    const auto z0 = torch::randn({5, 3}, gen, torch::kFloat64);
    const auto codes = e.index_select(0, quantize(z0, e));
    const auto w = torch::randn({5, 3}, gen, torch::kFloat64);
    auto z = z0.clone().requires_grad_(true);
    const auto decoder = [&](const torch::Tensor& q) { return (torch::tanh(q) * w).sum(); };
    // Analytic: through the estimator. Numeric: the decoder at the codes,
    // shifted by however far the check moved z.
    const auto r = oracle::check_gradients([&] { return decoder(straight_through(z, codes)); },
                                           [&] { return decoder(codes + (z - z0)); }, {z}, 15);
    CHECK(r.max_rel_error <= 1e-4);
    const auto fwd = straight_through(z0, codes);
    CHECK(torch::allclose(fwd, codes, 0.0, 1e-12));
  }

  TEST_CASE("vqvae loss gradients match finite differences") {
    auto gen = at::detail::createCPUGenerator(16);
    const auto opts = torch::TensorOptions().dtype(torch::kFloat64);
    const auto img = torch::rand({2, 3, 4, 4}, gen, opts);
    auto recon = torch::rand({2, 3, 4, 4}, gen, opts).requires_grad_(true);
    auto lat = torch::randn({2, 2, 2, 3}, gen, opts).requires_grad_(true);
    auto code = torch::randn({2, 2, 2, 3}, gen, opts).requires_grad_(true);
    // Stop-gradient terms: latents only see the commitment term and codes
    // only the codebook term, so those are what the numeric side perturbs.
    auto total = [&] { return vqvae_loss(img, recon, lat, code, 0.25).total; };
    auto r1 = oracle::check_gradients(total, {recon});
    auto r2 = oracle::check_gradients(total, [&] { return vqvae_loss(img, recon, lat, code, 0.25).commitment; },
                                      {lat});
    auto r3 = oracle::check_gradients(total, [&] { return vqvae_loss(img, recon, lat, code, 0.25).codebook; },
                                      {code});
    CHECK(r1.max_rel_error <= 1e-4);
    CHECK(r2.max_rel_error <= 1e-4);
    CHECK(r3.max_rel_error <= 1e-4);
  }

  TEST_CASE("decoding the same grid twice is bit-identical") {
    torch::manual_seed(1);
    VqVae vae(fixture::tiny_config());
    vae->eval();
    std::vector<std::int64_t> ids(16);
    for (int i = 0; i < 16; ++i) ids[static_cast<size_t>(i)] = i % 16;
    const ImageTokenGrid grid(4, ids);
    CHECK(vae->decode(grid) == vae->decode(grid));
  }

  TEST_CASE("shapes through encode, quantize and decode") {
    torch::manual_seed(2);
    const auto cfg = fixture::tiny_config();
    VqVae vae(cfg);
    const auto imgs = torch::rand({3, 3, 16, 16});
    const auto out = vae->forward(imgs);
    CHECK(out.latents.sizes() == torch::IntArrayRef({3, 4, 4, 8}));
    CHECK(out.indices.sizes() == torch::IntArrayRef({3, 4, 4}));
    CHECK(out.reconstruction.sizes() == imgs.sizes());
    const auto tokens = vae->tokenize_batch(imgs);
    CHECK(tokens.sizes() == torch::IntArrayRef({3, 16}));
    CHECK(tokens.max().item<std::int64_t>() < cfg.codebook_size);
    const auto rgb = vae->decode(tokens);
    CHECK(rgb.sizes() == torch::IntArrayRef({3, 16, 16, 3}));
    CHECK(rgb.min().item<double>() >= 0.0);
    CHECK(rgb.max().item<double>() <= 1.0);
    CHECK_THROWS_AS(vae->tokenize_batch(torch::rand({1, 3, 8, 8})), ShapeError);
  }

  TEST_CASE("token grid validates its size") {
    CHECK_THROWS(ImageTokenGrid(3, std::vector<std::int64_t>(8, 0)));
    const ImageTokenGrid g(2, {0, 1, 2, 3});
    CHECK(g.at(1, 0) == 2);
    CHECK(ImageTokenGrid::from_tensor(g.to_tensor()) == g);
  }

  TEST_CASE("codebook usage counts distinct rows") {
    const auto idx = torch::tensor({0, 0, 3, 5}, torch::kLong);
    CHECK(codebook_usage(idx, 8) == doctest::Approx(3.0 / 8.0));
  }

  TEST_CASE("tokenizer checkpoint round trip") {
    torch::manual_seed(3);
    VqVae vae(fixture::tiny_config());
    const auto path = std::filesystem::temp_directory_path() / "retrostory-tok-test.ckpt";
    training::save_tokenizer(path, *vae);
    auto back = training::load_tokenizer(path);
    const auto imgs = torch::rand({2, 3, 16, 16});
    CHECK(torch::equal(vae->tokenize_batch(imgs), back->tokenize_batch(imgs)));
    std::filesystem::remove(path);
  }
}
