#pragma once

#include <cstddef>
#include <string>

namespace adaptq {

enum class Origin { real, synthetic };

inline std::string to_string(Origin origin) { return origin == Origin::real ? "real" : "synthetic"; }

/// One answered (user, question) pair.
struct InteractionRecord {
    std::size_t user_index = 0;
    int question_id = 0;
    double value = 0.0;
    Origin origin = Origin::real;

    friend bool operator==(const InteractionRecord&, const InteractionRecord&) = default;
};

}  // namespace adaptq
