#include "sinklab/error.hpp"

namespace sinklab {

const char* category_name(ErrorCategory cat) {
    switch (cat) {
        case ErrorCategory::config: return "config error";
        case ErrorCategory::dimension: return "dimension error";
        case ErrorCategory::contract: return "contract error";
        case ErrorCategory::data: return "data error";
        case ErrorCategory::numeric: return "numeric error";
        case ErrorCategory::io: return "io error";
        case ErrorCategory::container: return "container error";
        case ErrorCategory::convergence: return "convergence error";
    }
    return "error";
}

}  // namespace sinklab
