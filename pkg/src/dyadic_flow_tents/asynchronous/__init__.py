from .processor import (
    CheckJob,
    CheckProcessor,
    CheckResult,
)
from .validator import (
    CompositeValidator,
    DeltaConditionValidator,
    DepthValidator,
    ExponentValidator,
    SampleCountValidator,
    ScaleValidator,
)
