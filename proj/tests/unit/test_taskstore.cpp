#include <gtest/gtest.h>

#include <memory>

#include "aotp/checks.hpp"
#include "aotp/error.hpp"
#include "aotp/forward.hpp"
#include "aotp/half.hpp"
#include "aotp/taskstore.hpp"
#include "scratch.hpp"

using namespace aotp;
using testing_support::read_bytes;
using testing_support::ScratchDir;
using testing_support::write_bytes;

namespace {

ModelConfig store_model() {
  ModelConfig m;
  m.vocab_size = 30;
  m.hidden = 8;
  m.layers = 2;
  m.heads = 2;
  m.max_seq = 12;
  return m;
}

BiasTable<float> random_table(std::size_t vocab, std::size_t d, std::size_t layers, std::uint64_t seed) {
  CounterRng rng(seed);
  std::vector<Tensor<float>> t;
  for (std::size_t i = 0; i < layers; ++i) {
    Tensor<float> layer = Tensor<float>::zeros(vocab, d);
    fill_normal(layer, rng, 1.0);
    t.push_back(std::move(layer));
  }
  return BiasTable<float>(std::move(t), DType::f32);
}

}  // namespace

TEST(TableFile, TinyHalfTableHasExactBytes) {
  ScratchDir dir;
  const auto path = dir.file("tiny.aotp");
  BiasTable<float> table({Tensor<float>::matrix({{1.0f}, {-2.0f}})}, DType::f32);
  write_table(table, path, DType::f16);
  const std::vector<unsigned char> want = {
      'A', 'O', 'T', 'P', 1, 0, 0, 0,  // magic, version
      2, 0, 0, 0, 1, 0, 0, 0,          // vocab, d
      1, 0, 0, 0, 1, 0, 0, 0,          // layers, dtype + padding
      0, 0, 0, 0, 0, 0, 0, 0,          //
      0x00, 0x3C, 0x00, 0xC0};         // 1.0, -2.0
  EXPECT_EQ(read_bytes(path), want);
}

TEST(TableFile, HeaderEncodeDecodeAndOffsets) {
  TableHeader h{50265, 1024, 24, DType::f16};
  const auto bytes = h.encode();
  EXPECT_EQ(TableHeader::decode(bytes), h);
  EXPECT_EQ(h.file_size(), 32ull + 50265ull * 1024 * 24 * 2);
  EXPECT_EQ(h.row_offset(0, 0), 32u);
  EXPECT_EQ(h.row_offset(1, 3), 32ull + (50265ull + 3) * 1024 * 2);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(TableHeader::decode(bad), FormatError);
  bad = bytes;
  bad[20] = 9;
  EXPECT_THROW(TableHeader::decode(bad), FormatError);
}

TEST(TableFile, Float32RoundTripIsLossless) {
  ScratchDir dir;
  const auto path = dir.file("t32.aotp");
  const auto table = random_table(17, 5, 3, 1);
  write_table(table, path, DType::f32);
  const TableReader<float> reader(path);
  EXPECT_EQ(reader.header().dtype, DType::f32);
  const auto loaded = reader.load_all();
  for (std::size_t l = 0; l < 3; ++l) EXPECT_EQ(loaded.layer(l), table.layer(l));
}

TEST(TableFile, HalfValuesAreRoundedToNearestEven) {
  ScratchDir dir;
  const auto path = dir.file("t16.aotp");
  const auto table = random_table(9, 4, 2, 2);
  write_table(table, path, DType::f16);
  const auto loaded = TableReader<float>(path).load_all();
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t i = 0; i < table.layer(l).size(); ++i)
      EXPECT_EQ(loaded.layer(l)[i], half_to_float(float_to_half(table.layer(l)[i])));
  EXPECT_EQ(loaded.layer(1), table.quantized(DType::f16).layer(1));
}

TEST(TableFile, ReadRowsReturnsRequestedRowsInOrder) {
  ScratchDir dir;
  const auto path = dir.file("rows.aotp");
  const auto table = random_table(20, 6, 2, 3);
  write_table(table, path, DType::f32);
  const std::vector<TokenId> tokens = {19, 0, 7, 7};
  const auto rows = read_rows<float>(path, 1, tokens);
  ASSERT_EQ(rows.rows(), 4u);
  for (std::size_t j = 0; j < tokens.size(); ++j) {
    const auto want = table.row(1, tokens[j]);
    EXPECT_TRUE(std::equal(want.begin(), want.end(), rows.row(j).begin()));
  }
  const std::vector<TokenId> bad = {20};
  EXPECT_THROW(read_rows<float>(path, 1, bad), InputError);
  EXPECT_THROW(read_rows<float>(path, 2, tokens), InputError);
}

TEST(TableFile, DamagedFilesAreRejected) {
  ScratchDir dir;
  const auto path = dir.file("ok.aotp");
  write_table(random_table(4, 3, 1, 4), path, DType::f32);
  auto bytes = read_bytes(path);

  auto truncated = bytes;
  truncated.pop_back();
  write_bytes(dir.file("short.aotp"), truncated);
  EXPECT_THROW(TableReader<float>(dir.file("short.aotp")), FormatError);

  auto magic = bytes;
  magic[1] = 'X';
  write_bytes(dir.file("magic.aotp"), magic);
  EXPECT_THROW(TableReader<float>(dir.file("magic.aotp")), FormatError);

  write_bytes(dir.file("header.aotp"), std::vector<unsigned char>(bytes.begin(), bytes.begin() + 10));
  EXPECT_THROW(TableReader<float>(dir.file("header.aotp")), FormatError);

  EXPECT_THROW(TableReader<float>(dir.file("missing.aotp")), IoError);
}

TEST(TableFile, ReadMemoryDoesNotGrowWithVocabulary) {
  ScratchDir dir;
  const std::size_t d = 16;
  const std::vector<TokenId> tokens = {3, 1, 2, 0, 5, 4};
  std::size_t peaks[2];
  const std::size_t vocabs[2] = {64, 20000};
  for (int i = 0; i < 2; ++i) {
    const auto path = dir.file("mem" + std::to_string(i) + ".aotp");
    write_table(random_table(vocabs[i], d, 1, 5), path, DType::f16);
    const TableReader<float> reader(path);
    peaks[i] = checks::peak_allocation([&] { (void)reader.read_rows(0, tokens); });
  }
  EXPECT_LE(peaks[0], 2 * tokens.size() * d * sizeof(float) + 4096);
  EXPECT_EQ(peaks[0], peaks[1]);
}

TEST(Checkpoint, NamedTensorsRoundTrip) {
  ScratchDir dir;
  NamedTensors<double> blob;
  blob.meta = {{"note", "x"}, {"n", 3}};
  blob.tensors.emplace_back("a", Tensor<double>::matrix({{1.5, -2.0}, {0.25, 3.0}}));
  blob.tensors.emplace_back("b", Tensor<double>::vector({7.0}));
  write_checkpoint(dir.file("c.aotc"), blob);
  const auto back = read_checkpoint<double>(dir.file("c.aotc"));
  EXPECT_EQ(back.meta, blob.meta);
  ASSERT_NE(back.find("a"), nullptr);
  EXPECT_EQ(*back.find("a"), blob.tensors[0].second);
  EXPECT_EQ(*back.find("b"), blob.tensors[1].second);
  EXPECT_EQ(back.find("c"), nullptr);

  auto bytes = read_bytes(dir.file("c.aotc"));
  bytes.resize(bytes.size() - 3);
  write_bytes(dir.file("short.aotc"), bytes);
  EXPECT_THROW(read_checkpoint<double>(dir.file("short.aotc")), FormatError);
}

TEST(Checkpoint, AdaptationRoundTripForEveryMethod) {
  ScratchDir dir;
  const auto m = store_model();
  const auto bb = Backbone<double>::random(m, 1);
  const std::vector<PeftConfig> configs = {AotKronConfig{6, 5, 2}, AotFcConfig{3}, PTuningV1Config{2},
                                           PTuningV2Config{3}, BitFitConfig{}, LoraConfig{2, 4.0, false},
                                           AdapterConfig{3, Activation::tanh}, FullConfig{}};
  for (const auto& config : configs) {
    auto a = make_adaptation<double>(config, bb, 3, 7, 0.3);
    a.for_each_param([i = 0.0](const std::string&, GradPair<double>& p) mutable {
      for (auto& x : p.value.flat()) x += (i += 0.01);
    });
    const auto path = dir.file("a.aotc");
    save_adaptation(path, a, m, {{"seed", 7}});
    nlohmann::json meta;
    auto back = load_adaptation<double>(path, bb, &meta);
    EXPECT_EQ(meta.at("seed"), 7);
    EXPECT_EQ(back.config, a.config);
    std::vector<Tensor<double>> want, got;
    a.for_each_param([&](const std::string&, GradPair<double>& p) { want.push_back(p.value); });
    back.for_each_param([&](const std::string&, GradPair<double>& p) { got.push_back(p.value); });
    EXPECT_EQ(got, want) << method_name(method_of(config));
  }
}

TEST(Manifest, JsonRoundTripAndBundleLoad) {
  ScratchDir dir;
  const auto m = store_model();
  const auto bb = Backbone<float>::random(m, 2);
  auto trained = make_adaptation<float>(AotKronConfig{6, 5, 2}, bb, 2, 3, 0.3);
  const auto fused = fuse_aot(trained, bb, DType::f32);
  const auto& rows = *std::get<FusedAotState<float>>(fused.state).rows;
  write_table(dynamic_cast<const BiasTable<float>&>(rows), dir.file("t.aotp"), DType::f32);
  save_head(dir.file("t.head.aotc"), fused.head);

  Manifest manifest{"sst", "aot-kron", "t.aotp", "t.head.aotc", 2, m, 2};
  manifest.save(dir.file("t.json"));
  const auto loaded = Manifest::load(dir.file("t.json"));
  EXPECT_EQ(loaded.to_json(), manifest.to_json());

  const auto bundle = load_bundle<float>(dir.file("t.json"), bb);
  EXPECT_EQ(bundle.task_id, "sst");
  EXPECT_EQ(bundle.num_classes(), 2u);
  EXPECT_FALSE(bundle.table_path.empty());
  const std::vector<TokenId> tokens = {1, 4, 9, 0};
  EXPECT_EQ(max_abs_diff(forward<float>(tokens, bb, bundle.adaptation), forward<float>(tokens, bb, fused)), 0.0);

  nlohmann::json broken = manifest.to_json();
  broken.erase("task_id");
  EXPECT_THROW(Manifest::from_json(broken), ConfigError);
}

TEST(Registry, RejectsDuplicatesAndUnknownIds) {
  const auto m = store_model();
  auto bb = std::make_shared<const Backbone<double>>(Backbone<double>::random(m, 3));
  TaskRegistry<double> registry(bb);
  registry.add(make_bundle("a", make_adaptation<double>(BitFitConfig{}, *bb, 2, 1), m));
  EXPECT_THROW(registry.add(make_bundle("a", make_adaptation<double>(BitFitConfig{}, *bb, 2, 2), m)), ConfigError);
  ModelConfig other = m;
  other.hidden = 12;
  const auto other_bb = Backbone<double>::random(other, 1);
  EXPECT_THROW(registry.add(make_bundle("b", make_adaptation<double>(BitFitConfig{}, other_bb, 2, 1), other)),
               ConfigError);
  EXPECT_TRUE(registry.contains("a"));
  EXPECT_THROW(registry.at("zzz"), InputError);
}

TEST(Memory, ClosedFormsAndBudget) {
  EXPECT_EQ(aot_request_bytes(16, 1024, 24, DType::f16), 786432u);
  EXPECT_EQ(aot_request_bytes(16, 1024, 24, DType::f32), 2u * 786432u);
  EXPECT_EQ(fused_lora_batch_params(1024, 48, 4), 805306368u);

  const auto m = store_model();
  auto bb = std::make_shared<const Backbone<double>>(Backbone<double>::random(m, 4));
  TaskRegistry<double> registry(bb);
  const auto kron = make_adaptation<double>(AotKronConfig{6, 5, 2}, *bb, 2, 1);
  registry.add(make_bundle("aot", fuse_aot(kron, *bb, DType::f16), m));
  const auto bitfit = make_adaptation<double>(BitFitConfig{}, *bb, 2, 1);
  registry.add(make_bundle("bitfit", bitfit, m));

  const auto report = memory_budget(registry, {10, 3, DType::f16});
  ASSERT_EQ(report.tasks.size(), 2u);
  EXPECT_EQ(report.tasks[0].task_id, "aot");
  EXPECT_EQ(report.tasks[0].request_resident_bytes, 10u * m.hidden * m.layers * 2);
  const std::uint64_t head_bytes = (m.hidden * 2 + 2) * 4;  // f32 head checkpoint
  EXPECT_EQ(report.tasks[0].disk_bytes, kTableHeaderBytes + fused_table_bytes(m, DType::f16) + head_bytes);
  EXPECT_EQ(report.tasks[1].request_resident_bytes, bitfit.trainable_scalars(false) * sizeof(double));
  EXPECT_EQ(report.fused_lora_batch_params, 4u * m.hidden * m.hidden * m.layers * 3);
  EXPECT_EQ(report.fused_lora_batch_bytes, report.fused_lora_batch_params * 2);
  EXPECT_TRUE(report.to_json().contains("tasks"));
}
