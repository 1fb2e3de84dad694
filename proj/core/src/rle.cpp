#include <stdexcept>

#include "vitkit/video.hpp"

namespace vita {

std::vector<std::uint32_t> rle_encode(const std::vector<std::uint8_t>& mask) {
    std::vector<std::uint32_t> runs;
    std::uint8_t cur = 0;
    std::uint32_t len = 0;
    for (std::uint8_t v : mask) {
        const std::uint8_t bit = v ? 1 : 0;
        if (bit == cur) {
            ++len;
        } else {
            runs.push_back(len);
            cur = bit;
            len = 1;
        }
    }
    runs.push_back(len);
    return runs;
}

std::vector<std::uint8_t> rle_decode(const std::vector<std::uint32_t>& runs, std::size_t size) {
    std::vector<std::uint8_t> mask;
    mask.reserve(size);
    std::uint8_t cur = 0;
    for (std::uint32_t len : runs) {
        mask.insert(mask.end(), len, cur);
        cur = cur ? 0 : 1;
    }
    if (mask.size() != size) throw std::runtime_error("rle_decode: run lengths sum to " + std::to_string(mask.size()) +
                                                      ", expected " + std::to_string(size));
    return mask;
}

}  // namespace vita
