from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path


@dataclass(frozen=True)
class AdapterConfig:
    model_path: Path
    confidence: float = 0.25
    device: str = "cpu"
    protocol_version: int = 1
    max_image_side: int = 8192

    def __post_init__(self) -> None:
        if not Path(self.model_path).exists():
            raise FileNotFoundError(f"model file does not exist: {self.model_path}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence threshold must be in [0, 1], got {self.confidence}")
        if self.protocol_version != 1:
            raise ValueError(f"unsupported protocol version {self.protocol_version}")
