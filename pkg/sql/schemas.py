from datetime import datetime
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field


class Run:

    class _Base(BaseModel):
        run_id: int

    class Add(BaseModel):
        command: Literal["preprocess", "train", "infer", "eval", "synth"]
        config_hash: str
        seed: int
        code_version: str
        started_at: datetime
        artifact_path: Optional[str] = None

    class Get(_Base):
        pass

    class Finish(_Base):
        status: Literal["ok", "failed"]
        finished_at: datetime
        artifact_path: Optional[str] = None

    class List(BaseModel):
        command: Optional[str] = None
        n: Optional[int] = Field(None, ge=1)

    class Read(BaseModel):
        model_config = ConfigDict(from_attributes=True)

        id: int
        command: str
        config_hash: str
        seed: int
        code_version: str
        started_at: datetime
        finished_at: Optional[datetime] = None
        status: str
        artifact_path: Optional[str] = None
