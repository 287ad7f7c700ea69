from pydantic import BaseModel, ConfigDict


class BaseSchema(BaseModel):
    """
    Base Schema for Pydantic models.
    Values are immutable and unknown fields are rejected.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")
