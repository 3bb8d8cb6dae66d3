"""Long-range dependency synthesis for short instruction data via skipped position ids."""

__version__ = "0.1.0"

from .corpus import (  # noqa: E402
    Block,
    ByteTokenizer,
    DataError,
    IngestConfig,
    Role,
    Sample,
    TrainingRecord,
    ingest,
    to_record,
    truncate,
)
from .skip import (  # noqa: E402
    PositionAssignment,
    SkipConfig,
    SkipPlan,
    Strategy,
    SubsampleMode,
    apply_plan,
    augment,
    dense_positions,
    is_eligible,
    plan_skips,
)
from .pack import PackConfig, PackedSequence, pack  # noqa: E402
from .distance import DistanceHistogram, distance_set, histogram, report  # noqa: E402
