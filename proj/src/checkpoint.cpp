#include "sparseloc/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <vector>

namespace sparseloc {
namespace {

constexpr char kMagic[4] = {'S', 'L', 'C', 'P'};
constexpr std::uint32_t kVersion = 1;

struct Record {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<float> data;
};

void write_u32(std::ofstream& f, std::uint32_t v) {
  f.write(reinterpret_cast<const char*>(&v), 4);
}

void write_u64(std::ofstream& f, std::uint64_t v) {
  f.write(reinterpret_cast<const char*>(&v), 8);
}

void write_record(std::ofstream& f, const std::string& name,
                  std::vector<std::uint64_t> dims, const float* data,
                  std::size_t len) {
  write_u32(f, static_cast<std::uint32_t>(name.size()));
  f.write(name.data(), std::streamsize(name.size()));
  write_u32(f, static_cast<std::uint32_t>(dims.size()));
  std::size_t expect = 1;
  for (const std::uint64_t d : dims) {
    write_u64(f, d);
    expect *= std::size_t(d);
  }
  if (expect != len) throw shape_error("checkpoint: dims/data mismatch for " + name);
  f.write(reinterpret_cast<const char*>(data), std::streamsize(len * 4));
}

std::uint32_t read_u32(std::ifstream& f) {
  std::uint32_t v = 0;
  f.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

std::uint64_t read_u64(std::ifstream& f) {
  std::uint64_t v = 0;
  f.read(reinterpret_cast<char*>(&v), 8);
  return v;
}

using RecordMap = std::map<std::string, Record>;

RecordMap read_records(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot open checkpoint: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    throw data_error("not a checkpoint file: " + path);
  const std::uint32_t version = read_u32(f);
  if (version != kVersion)
    throw data_error("unsupported checkpoint version in " + path);
  const std::uint32_t count = read_u32(f);
  RecordMap map;
  for (std::uint32_t r = 0; r < count && f; ++r) {
    Record rec;
    const std::uint32_t name_len = read_u32(f);
    rec.name.resize(name_len);
    f.read(rec.name.data(), name_len);
    const std::uint32_t ndim = read_u32(f);
    std::size_t len = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      rec.dims.push_back(read_u64(f));
      len *= std::size_t(rec.dims.back());
    }
    rec.data.resize(len);
    f.read(reinterpret_cast<char*>(rec.data.data()), std::streamsize(len * 4));
    map.emplace(rec.name, std::move(rec));
  }
  if (!f) throw data_error("truncated checkpoint: " + path);
  return map;
}

const Record& expect(const RecordMap& map, const std::string& name,
                     const std::vector<std::uint64_t>& dims) {
  const auto it = map.find(name);
  if (it == map.end())
    throw shape_error("checkpoint: missing record " + name);
  if (it->second.dims != dims)
    throw shape_error("checkpoint: shape mismatch for " + name);
  return it->second;
}

}  // namespace

void save_checkpoint(const std::string& path, const net::LocNetParams<float>& params,
                     const train::AdamState<float>* opt, std::int64_t epoch) {
  // for_each_param needs mutable refs; copies keep the API const here
  net::LocNetParams<float> p = params;
  net::LocNetGrads<float> dummy;
  dummy.init_like(p);

  struct Item {
    std::string name;
    std::vector<std::uint64_t> dims;
    const float* data;
    std::size_t len;
  };
  std::vector<Item> items;
  std::vector<std::vector<float>> scratch;  // keeps copied arrays alive

  net::for_each_param(p, dummy, [&](const std::string& name, float* v, float*,
                                    std::size_t len) {
    scratch.emplace_back(v, v + len);
    items.push_back({name, {std::uint64_t(len)}, scratch.back().data(), len});
  });
  // record conv weights with their logical shape instead of flat
  auto reshape = [&](const std::string& name, const nn::ConvParams<float>& c) {
    for (Item& it : items)
      if (it.name == name + ".w")
        it.dims = {std::uint64_t(c.volume()), std::uint64_t(c.in_ch),
                   std::uint64_t(c.out_ch)};
  };
  reshape("conv0", p.conv0);
  reshape("conv1", p.conv1);
  reshape("conv2", p.conv2);
  reshape("conv3", p.conv3);
  reshape("tconv3", p.tconv3);
  reshape("lateral", p.lateral);

  auto buffer = [&](const std::string& name, const std::vector<float>& v) {
    scratch.emplace_back(v);
    items.push_back({name, {std::uint64_t(v.size())}, scratch.back().data(), v.size()});
  };
  buffer("norm0.running_mean", p.norm0.running_mean);
  buffer("norm0.running_var", p.norm0.running_var);
  buffer("norm1.running_mean", p.norm1.running_mean);
  buffer("norm1.running_var", p.norm1.running_var);
  buffer("norm2.running_mean", p.norm2.running_mean);
  buffer("norm2.running_var", p.norm2.running_var);
  buffer("norm3.running_mean", p.norm3.running_mean);
  buffer("norm3.running_var", p.norm3.running_var);

  std::vector<float> meta = {float(epoch)};
  items.push_back({"train.epoch", {1}, meta.data(), 1});

  std::vector<std::vector<float>> opt_scratch;
  if (opt) {
    std::size_t slot = 0;
    net::for_each_param(p, dummy, [&](const std::string& name, float*, float*,
                                      std::size_t len) {
      opt_scratch.push_back(opt->m.at(slot));
      items.push_back({"adam.m." + name, {std::uint64_t(len)},
                       opt_scratch.back().data(), len});
      opt_scratch.push_back(opt->v.at(slot));
      items.push_back({"adam.v." + name, {std::uint64_t(len)},
                       opt_scratch.back().data(), len});
      ++slot;
    });
    opt_scratch.push_back({float(opt->step)});
    items.push_back({"adam.step", {1}, opt_scratch.back().data(), 1});
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw data_error("cannot open checkpoint for writing: " + path);
  f.write(kMagic, 4);
  write_u32(f, kVersion);
  write_u32(f, static_cast<std::uint32_t>(items.size()));
  for (const Item& it : items) write_record(f, it.name, it.dims, it.data, it.len);
  if (!f) throw data_error("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path, const net::ArchConfig& arch) {
  const RecordMap map = read_records(path);
  Checkpoint ck;
  ck.params = net::LocNetParams<float>::make(arch, 0);
  net::LocNetGrads<float> dummy;
  dummy.init_like(ck.params);

  auto conv_dims = [](const nn::ConvParams<float>& c) {
    return std::vector<std::uint64_t>{std::uint64_t(c.volume()),
                                      std::uint64_t(c.in_ch),
                                      std::uint64_t(c.out_ch)};
  };
  std::map<std::string, std::vector<std::uint64_t>> shapes;
  shapes["conv0.w"] = conv_dims(ck.params.conv0);
  shapes["conv1.w"] = conv_dims(ck.params.conv1);
  shapes["conv2.w"] = conv_dims(ck.params.conv2);
  shapes["conv3.w"] = conv_dims(ck.params.conv3);
  shapes["tconv3.w"] = conv_dims(ck.params.tconv3);
  shapes["lateral.w"] = conv_dims(ck.params.lateral);

  net::for_each_param(ck.params, dummy, [&](const std::string& name, float* v,
                                            float*, std::size_t len) {
    const auto it = shapes.find(name);
    const std::vector<std::uint64_t> dims =
        it != shapes.end() ? it->second
                           : std::vector<std::uint64_t>{std::uint64_t(len)};
    const Record& rec = expect(map, name, dims);
    std::copy(rec.data.begin(), rec.data.end(), v);
  });

  auto load_buffer = [&](const std::string& name, std::vector<float>& v) {
    const Record& rec = expect(map, name, {std::uint64_t(v.size())});
    v = rec.data;
  };
  load_buffer("norm0.running_mean", ck.params.norm0.running_mean);
  load_buffer("norm0.running_var", ck.params.norm0.running_var);
  load_buffer("norm1.running_mean", ck.params.norm1.running_mean);
  load_buffer("norm1.running_var", ck.params.norm1.running_var);
  load_buffer("norm2.running_mean", ck.params.norm2.running_mean);
  load_buffer("norm2.running_var", ck.params.norm2.running_var);
  load_buffer("norm3.running_mean", ck.params.norm3.running_mean);
  load_buffer("norm3.running_var", ck.params.norm3.running_var);

  ck.epoch = std::int64_t(expect(map, "train.epoch", {1}).data[0]);

  if (map.count("adam.step")) {
    train::AdamState<float> st;
    st.init_like(ck.params);
    std::size_t slot = 0;
    net::for_each_param(ck.params, dummy, [&](const std::string& name, float*,
                                              float*, std::size_t len) {
      st.m[slot] = expect(map, "adam.m." + name, {std::uint64_t(len)}).data;
      st.v[slot] = expect(map, "adam.v." + name, {std::uint64_t(len)}).data;
      ++slot;
    });
    st.step = std::int64_t(expect(map, "adam.step", {1}).data[0]);
    ck.opt = std::move(st);
  }
  return ck;
}

}  // namespace sparseloc
