#pragma once

#include <vector>

#include "mnas/tensor.hpp"

namespace mnas {

// One few-shot task: adapt on the support set, evaluate on the query set.
// Images are [n,1,H,W]; labels already relabeled to [0, n_way).
struct Episode {
    int n_way = 0;
    int k_shot = 0;
    int query_per_class = 0;
    Tensor support_x;
    std::vector<int> support_y;
    Tensor query_x;
    std::vector<int> query_y;
};

}  // namespace mnas
