__copyright__ = "Copyright (c) 2024-2025 Alex Laird"
__license__ = "MIT"

import logging
from typing import Any, Dict, Optional

from buildmonitor.entity.record import Record
from buildmonitor.geomcore import RigidTransform

logger = logging.getLogger(__name__)


class PoseSample(Record):
    """
    A timestamped robot pose: the tool frame {B} in the work-object frame {O}.
    """

    def __init__(self,
                 parsed: Dict[str, Any],
                 line_number: int = 0) -> None:
        super().__init__(parsed, line_number)

        #: Sample time, in µs.
        self.t_us: Optional[int] = self.safe_simple_parse(key="t_us", cast=int, required=True)
        #: The pose, re-orthonormalized on ingest.
        self.transform: Optional[RigidTransform] = self.safe_parse(self._parse_transform)

    def __repr__(self) -> str:
        return f"<PoseSample: {self.t_us} µs>"

    @classmethod
    def build(cls,
              t_us: int,
              transform: RigidTransform) -> "PoseSample":
        sample = cls({"t_us": int(t_us), "r": transform.rotation.reshape(-1).tolist(),
                      "t": transform.translation.tolist()})
        return sample

    @property
    def t(self) -> float:
        return self.t_us / 1e6

    def to_dict(self) -> Dict[str, Any]:
        return {"t_us": self.t_us,
                "r": [round(float(v), 12) for v in self.transform.rotation.reshape(-1)],
                "t": [round(float(v), 6) for v in self.transform.translation]}

    def _parse_transform(self) -> RigidTransform:
        return RigidTransform.from_external(self.simple_parse("r", required=True),
                                            self.simple_parse("t", required=True))
