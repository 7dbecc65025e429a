#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <future>
#include <string>
#include <vector>

#include "specsim/drafter.hpp"
#include "specsim/errors.hpp"

namespace specsim {

// Checkpoint layout (all integers little-endian):
//   magic "SSDCKPT1" | byte-order marker | format version | drafter version
//   | vocab | order | alpha bits | context count | sparse count rows
//   | fnv1a-64 checksum of everything before the trailer
inline constexpr char kCheckpointMagic[8] = {'S', 'S', 'D', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointByteOrder = 0x01020304u;
inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

namespace detail {

inline std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t len) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= data[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

struct ByteWriter {
    std::vector<std::uint8_t> bytes;

    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        bytes.insert(bytes.end(), b, b + n);
    }
    template <typename T>
    void le(T value) {
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            bytes.push_back(static_cast<std::uint8_t>(
                (static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff));
        }
    }
};

struct ByteReader {
    const std::uint8_t* data;
    std::size_t len;
    std::size_t pos = 0;

    void raw(void* out, std::size_t n) {
        if (pos + n > len) throw CheckpointError("corrupt checkpoint: truncated");
        std::memcpy(out, data + pos, n);
        pos += n;
    }
    template <typename T>
    T le() {
        if (pos + sizeof(T) > len) throw CheckpointError("corrupt checkpoint: truncated");
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            v |= static_cast<std::uint64_t>(data[pos + i]) << (8 * i);
        }
        pos += sizeof(T);
        return static_cast<T>(v);
    }
};

} // namespace detail

/// Trainable drafter state only: version, shape, smoothing constant and the
/// count table. Restoring reproduces bit-identical predictions; nothing of
/// the target model is ever written.
class DrafterCheckpoint {
public:
    DrafterCheckpoint() = default;
    explicit DrafterCheckpoint(const AdaptiveDrafter& d)
        : version_(d.version()), vocab_(d.vocab_size()), order_(d.order()),
          alpha_(d.smoothing_alpha()), counts_(d.counts()) {}

    std::int64_t version() const { return version_; }
    int order() const { return order_; }
    double smoothing_alpha() const { return alpha_; }
    const AdaptiveDrafter::Counts& counts() const { return counts_; }

    std::vector<std::uint8_t> to_bytes() const {
        detail::ByteWriter w;
        w.raw(kCheckpointMagic, sizeof(kCheckpointMagic));
        w.le<std::uint32_t>(kCheckpointByteOrder);
        w.le<std::uint32_t>(kCheckpointFormatVersion);
        w.le<std::int64_t>(version_);
        w.le<std::int32_t>(vocab_);
        w.le<std::int32_t>(order_);
        w.le<std::uint64_t>(std::bit_cast<std::uint64_t>(alpha_));
        w.le<std::uint64_t>(counts_.size());
        for (const auto& [ctx, row] : counts_) {
            for (TokenId t : ctx) w.le<std::int32_t>(t);
            std::uint32_t nonzero = 0;
            for (std::uint64_t c : row) nonzero += (c != 0);
            w.le<std::uint32_t>(nonzero);
            for (std::size_t i = 0; i < row.size(); ++i) {
                if (row[i] != 0) {
                    w.le<std::int32_t>(static_cast<std::int32_t>(i));
                    w.le<std::uint64_t>(row[i]);
                }
            }
        }
        w.le<std::uint64_t>(detail::fnv1a64(w.bytes.data(), w.bytes.size()));
        return std::move(w.bytes);
    }

    static DrafterCheckpoint from_bytes(const std::vector<std::uint8_t>& bytes) {
        if (bytes.size() < sizeof(kCheckpointMagic) + 8)
            throw CheckpointError("corrupt checkpoint: truncated");
        std::uint64_t expect = detail::fnv1a64(bytes.data(), bytes.size() - 8);
        detail::ByteReader tail{bytes.data() + bytes.size() - 8, 8};
        if (tail.le<std::uint64_t>() != expect)
            throw CheckpointError("corrupt checkpoint: checksum mismatch");

        detail::ByteReader r{bytes.data(), bytes.size() - 8};
        char magic[8];
        r.raw(magic, sizeof(magic));
        if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
            throw CheckpointError("corrupt checkpoint: bad magic");
        if (r.le<std::uint32_t>() != kCheckpointByteOrder)
            throw CheckpointError("corrupt checkpoint: byte-order mismatch");
        if (r.le<std::uint32_t>() != kCheckpointFormatVersion)
            throw CheckpointError("corrupt checkpoint: format version mismatch");

        DrafterCheckpoint c;
        c.version_ = r.le<std::int64_t>();
        c.vocab_ = r.le<std::int32_t>();
        c.order_ = r.le<std::int32_t>();
        c.alpha_ = std::bit_cast<double>(r.le<std::uint64_t>());
        if (c.vocab_ < 2 || c.order_ < 0)
            throw CheckpointError("corrupt checkpoint: invalid drafter shape");
        std::uint64_t rows = r.le<std::uint64_t>();
        for (std::uint64_t i = 0; i < rows; ++i) {
            TokenSeq ctx(static_cast<std::size_t>(c.order_));
            for (auto& t : ctx) t = r.le<std::int32_t>();
            std::vector<std::uint64_t> row(static_cast<std::size_t>(c.vocab_), 0);
            std::uint32_t nonzero = r.le<std::uint32_t>();
            for (std::uint32_t k = 0; k < nonzero; ++k) {
                std::int32_t tok = r.le<std::int32_t>();
                std::uint64_t count = r.le<std::uint64_t>();
                if (tok < 0 || tok >= c.vocab_)
                    throw CheckpointError("corrupt checkpoint: token out of range");
                row[static_cast<std::size_t>(tok)] = count;
            }
            c.counts_.emplace(std::move(ctx), std::move(row));
        }
        if (r.pos != r.len) throw CheckpointError("corrupt checkpoint: trailing bytes");
        return c;
    }

private:
    friend AdaptiveDrafter restore_checkpoint(const DrafterCheckpoint&);

    std::int64_t version_ = 0;
    std::int32_t vocab_ = 2;
    std::int32_t order_ = 0;
    double alpha_ = 1.0;
    AdaptiveDrafter::Counts counts_;
};

inline DrafterCheckpoint save_checkpoint(const AdaptiveDrafter& d) {
    return DrafterCheckpoint(d);
}

inline AdaptiveDrafter restore_checkpoint(const DrafterCheckpoint& c) {
    AdaptiveDrafter d(c.vocab_, c.order_, c.alpha_);
    d.set_version(c.version_);
    for (const auto& [ctx, row] : c.counts_) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (row[i] != 0) d.add_count(ctx, static_cast<TokenId>(i), row[i]);
        }
    }
    return d;
}

inline void write_checkpoint_file(const DrafterCheckpoint& c, const std::string& path) {
    auto bytes = c.to_bytes();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open checkpoint file for writing: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("short write to checkpoint file: " + path);
}

inline DrafterCheckpoint read_checkpoint_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint file: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return DrafterCheckpoint::from_bytes(bytes);
}

/// Snapshot-isolated background save: the state is copied at call time and
/// serialized off-thread, so training may continue on the live drafter.
inline std::future<void> save_checkpoint_async(const AdaptiveDrafter& d, std::string path) {
    DrafterCheckpoint snap(d);
    return std::async(std::launch::async, [snap = std::move(snap), path = std::move(path)] {
        write_checkpoint_file(snap, path);
    });
}

} // namespace specsim
