#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "csidiff/codebook.hpp"
#include "csidiff/errors.hpp"

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest_compat.hpp"

using namespace csidiff;

namespace {

Codebook two_point_book() {
  return Codebook{torch::tensor({{0.0f, 0.0f}, {1.0f, 1.0f}})};
}

}  // namespace

TEST_CASE("nearest_indices picks the closest vector, lowest index on ties") {
  auto book = two_point_book();
  auto v = torch::tensor({{0.9f, 0.8f}});
  CHECK(nearest_indices(v, book.vectors).item<std::int64_t>() == 1);

  auto tie = torch::tensor({{0.5f, 0.5f}});
  CHECK(nearest_indices(tie, book.vectors).item<std::int64_t>() == 0);

  auto near_zero = torch::tensor({{0.1f, -0.2f}});
  CHECK(nearest_indices(near_zero, book.vectors).item<std::int64_t>() == 0);
}

TEST_CASE("quantization is idempotent") {
  torch::manual_seed(3);
  Codebook book = Codebook::init(8, 16);
  auto c = torch::randn({kCodeVectors, 16});
  auto [word, e] = quantize(c, book);
  auto [word2, e2] = quantize(e, book);
  CHECK(word.indices == word2.indices);
  CHECK(torch::equal(e, e2));
}

TEST_CASE("dequantize looks entries up by index") {
  torch::manual_seed(41);
  Codebook book = Codebook::init(4, 8);
  Codeword word;
  word.n_v = 4;
  for (int i = 0; i < kCodeVectors; ++i) word.indices.push_back(i % 4);
  auto e = dequantize(word, book);
  CHECK(e.sizes() == torch::IntArrayRef({kCodeGrid, kCodeGrid, 8}));
  auto flat = e.reshape({kCodeVectors, 8});
  for (int i = 0; i < kCodeVectors; ++i) {
    CHECK(torch::equal(flat[i], book.vectors[i % 4]));
  }
}

TEST_CASE("quantize agrees with dequantize of its own codeword") {
  torch::manual_seed(7);
  Codebook book = Codebook::init(8, 16);
  auto c = torch::randn({kCodeGrid, kCodeGrid, 16});
  auto [word, e] = quantize(c, book);
  CHECK(e.sizes() == c.sizes());
  CHECK(torch::equal(e, dequantize(word, book)));
}

TEST_CASE("codebook_loss is zero when inputs already sit on the codebook") {
  auto book = two_point_book();
  auto c = torch::tensor({{1.0f, 1.0f}, {0.0f, 0.0f}});
  auto e = torch::index_select(book.vectors, 0, nearest_indices(c, book.vectors));
  CHECK(codebook_loss(c, e).item<double>() == doctest::Approx(0.0));
}

TEST_CASE("codebook_loss doubles the squared distance") {
  // both stop-gradient terms evaluate to the same squared distance
  auto c = torch::tensor({{1.0f, 0.0f}});
  auto e = torch::tensor({{0.0f, 0.0f}});
  CHECK(codebook_loss(c, e).item<double>() == doctest::Approx(2.0));
}

TEST_CASE("codebook_loss gradients match finite differences") {
  auto c0 = torch::tensor({{0.7, -0.3}}, torch::kDouble);
  auto e0 = torch::tensor({{0.2, 0.4}}, torch::kDouble);

  auto c = c0.clone().requires_grad_(true);
  auto e = e0.clone().requires_grad_(true);
  codebook_loss(c, e).backward();

  // analytic: dL/dc = 2(c - e) from the commitment term, dL/de = 2(e - c)
  CHECK(torch::allclose(c.grad(), 2.0 * (c0 - e0), 1e-9, 1e-9));
  CHECK(torch::allclose(e.grad(), 2.0 * (e0 - c0), 1e-9, 1e-9));

  // finite differences on the single live term: the other one is behind a
  // stop-gradient, so it must not contribute to dL/dc
  const auto commit = [&](const torch::Tensor& cv) {
    return (cv - e0).pow(2).sum().item<double>();
  };
  const double h = 1e-6;
  for (int j = 0; j < 2; ++j) {
    auto cp = c0.clone();
    cp[0][j] += h;
    auto cm = c0.clone();
    cm[0][j] -= h;
    const double fd = (commit(cp) - commit(cm)) / (2 * h);
    CHECK(c.grad()[0][j].item<double>() == doctest::Approx(fd).epsilon(1e-3));
  }
}

TEST_CASE("codebook_loss averages per-sample sums over a batch") {
  auto c = torch::zeros({2, 3, 2});
  auto e = torch::zeros({2, 3, 2});
  c[0][0][0] = 1.0f;  // sample 0 contributes 2.0
  c[1][0][0] = 1.0f;  // sample 1 contributes 2.0
  c[1][1][1] = 1.0f;  // plus 2.0
  CHECK(codebook_loss(c, e).item<double>() == doctest::Approx(3.0));
}

TEST_CASE("straight_through passes values forward and gradients around") {
  auto c = torch::tensor({0.3, 0.9}, torch::kDouble).requires_grad_(true);
  auto e = torch::tensor({0.0, 1.0}, torch::kDouble);
  auto st = straight_through(c, e);
  CHECK(torch::allclose(st, e));
  st.sum().backward();
  CHECK(torch::allclose(c.grad(), torch::ones_like(c)));
}

TEST_CASE("rate_for maps codebook sizes to bit budgets") {
  CHECK(rate_for(2) == 64);
  CHECK(rate_for(4) == 128);
  CHECK(rate_for(8) == 192);
  CHECK(rate_for(16) == 256);
  CHECK_THROWS_AS(rate_for(3), config_error);
  CHECK_THROWS_AS(rate_for(0), config_error);
  CHECK_THROWS_AS(rate_for(1), config_error);
}

TEST_CASE("pack_bits lays indices out MSB-first") {
  // 2-bit indices 0,1,2,3 -> 00 01 10 11 -> 0x1B
  std::vector<std::uint32_t> small{0, 1, 2, 3};
  auto bits = pack_fixed_width(small, 2);
  CHECK(bits.n_bits == 8);
  REQUIRE(bits.bytes.size() == 1);
  CHECK(bits.bytes[0] == 0x1B);

  // 64 one-bit indices alternating 1,0 -> 0xAA in every byte
  std::vector<std::uint32_t> alternating(64);
  for (size_t i = 0; i < alternating.size(); ++i) alternating[i] = (i + 1) % 2;
  auto one_bit = pack_bits(alternating, 2);
  CHECK(one_bit.n_bits == 64);
  REQUIRE(one_bit.bytes.size() == 8);
  for (auto b : one_bit.bytes) CHECK(b == 0xAA);
}

TEST_CASE("packing round-trips for every supported codebook size") {
  torch::manual_seed(17);
  for (std::int64_t n_v : {2, 4, 8, 16}) {
    std::vector<std::uint32_t> idx(kCodeVectors);
    for (auto& v : idx) v = static_cast<std::uint32_t>(torch::randint(n_v, {1}).item<std::int64_t>());
    auto bits = pack_bits(idx, n_v);
    CHECK(bits.n_bits == static_cast<std::uint64_t>(rate_for(n_v)));
    CHECK(unpack_bits(bits, n_v) == idx);
  }
}

TEST_CASE("pack rejects out-of-range values") {
  CHECK_THROWS_AS(pack_bits({4}, 4), config_error);
  CHECK_THROWS_AS(pack_fixed_width({64}, 6), config_error);
}

TEST_CASE("unpack rejects a bit length that is not a multiple of the width") {
  BitString bits;
  bits.bytes = {0xFF};
  bits.n_bits = 7;
  CHECK_THROWS_AS(unpack_fixed_width(bits, 2), data_error);

  BitString short_buf;
  short_buf.n_bits = 16;
  short_buf.bytes = {0x00};
  CHECK_THROWS_AS(unpack_fixed_width(short_buf, 2), data_error);
}

TEST_CASE("quantize_batch keeps the distance invariant") {
  torch::manual_seed(29);
  Codebook book = Codebook::init(8, 32);
  auto vecs = torch::randn({3, kCodeVectors, 32});
  auto [idx, e] = quantize_batch(vecs, book.vectors);
  auto d_chosen = (vecs - e).pow(2).sum(-1);
  for (std::int64_t v = 0; v < 8; ++v) {
    auto d_v = (vecs - book.vectors[v]).pow(2).sum(-1);
    CHECK((d_chosen <= d_v + 1e-6).all().item<bool>());
  }
  CHECK(idx.sizes() == torch::IntArrayRef({3, kCodeVectors}));
  CHECK(torch::equal(e, torch::index_select(book.vectors, 0, idx.reshape(-1)).reshape(e.sizes())));
}

TEST_CASE("quantize_batch keeps e differentiable with respect to the codebook") {
  torch::manual_seed(57);
  auto book_param = torch::randn({4, 8}, torch::requires_grad());
  auto vecs = torch::randn({2, kCodeVectors, 8});
  auto [idx, e] = quantize_batch(vecs, book_param);
  e.sum().backward();
  REQUIRE(book_param.grad().defined());
  // each selected row receives gradient 1 per coordinate per selection
  auto counts = torch::zeros({4});
  auto flat = idx.reshape(-1);
  for (std::int64_t i = 0; i < flat.size(0); ++i) counts[flat[i].item<std::int64_t>()] += 1.0f;
  CHECK(torch::allclose(book_param.grad(), counts.unsqueeze(1).expand({4, 8})));
}

TEST_CASE("codeword records round-trip through a stream") {
  torch::manual_seed(31);
  std::stringstream buf;
  std::vector<Codeword> words;
  for (int i = 0; i < 5; ++i) {
    Codeword w;
    w.n_v = 8;
    for (int j = 0; j < kCodeVectors; ++j) {
      w.indices.push_back(static_cast<std::uint32_t>(torch::randint(8, {1}).item<std::int64_t>()));
    }
    words.push_back(w);
    write_codeword_record(buf, kCodewordMagicVq, 8, w.to_bits());
  }

  for (const auto& w : words) {
    auto [param, bits] = read_codeword_record(buf, kCodewordMagicVq);
    CHECK(param == 8);
    auto back = Codeword::from_bits(bits, param);
    CHECK(back.indices == w.indices);
  }

  const auto n = static_cast<std::size_t>(buf.tellp());
  CHECK(n == words.size() * codeword_record_bytes(192));
}

TEST_CASE("codeword reader rejects the wrong magic and truncation") {
  std::stringstream buf;
  Codeword w;
  w.n_v = 4;
  w.indices.assign(kCodeVectors, 1);
  write_codeword_record(buf, kCodewordMagicVq, 4, w.to_bits());
  const std::string payload = buf.str();

  {
    std::stringstream wrong(payload);
    CHECK_THROWS_AS(read_codeword_record(wrong, kCodewordMagicUniform), data_error);
  }
  {
    std::stringstream cut(payload.substr(0, payload.size() - 3));
    CHECK_THROWS_AS(read_codeword_record(cut, kCodewordMagicVq), data_error);
  }
  {
    std::stringstream cut(payload.substr(0, 2));
    CHECK_THROWS_AS(read_codeword_record(cut, kCodewordMagicVq), data_error);
  }
}

TEST_CASE("codebook initialization is deterministic in the torch seed") {
  torch::manual_seed(77);
  auto a = Codebook::init(8, kCodeDim);
  torch::manual_seed(77);
  auto b = Codebook::init(8, kCodeDim);
  torch::manual_seed(78);
  auto c = Codebook::init(8, kCodeDim);
  CHECK(torch::equal(a.vectors, b.vectors));
  CHECK_FALSE(torch::equal(a.vectors, c.vectors));
  CHECK(a.vectors.abs().max().item<float>() <= 1.0f / 8 + 1e-7f);
  CHECK(a.vectors.sizes() == torch::IntArrayRef({8, kCodeDim}));
}

TEST_CASE("codebook validation rejects malformed books") {
  Codebook bad{torch::zeros({3, 4})};
  CHECK_THROWS_AS(bad.validate(), config_error);
  Codebook nan_book{torch::full({4, 4}, std::numeric_limits<float>::quiet_NaN())};
  CHECK_THROWS_AS(nan_book.validate(), numerical_error);
  Codebook ok = Codebook::init(4, 4);
  CHECK_NOTHROW(ok.validate());
}
