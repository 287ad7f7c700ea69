"""
Application Settings
Process-level configuration for the shell lab.

Uses python-decouple so every value can come from the environment or a
local .env file. Run-specific parameters (flow, source, mesh policy, radii)
live in the strict run configuration (app.schemas.run_config), not here.
"""

import os

from decouple import config


class Settings:
    """
    Process configuration.
    Values that change numbers in artifacts never live here.
    """

    # ========================================================================
    # APPLICATION
    # ========================================================================
    APP_NAME: str = config("APP_NAME", default="oseen-shell-lab")
    VERSION: str = "0.1.0"

    # ========================================================================
    # LOGGING
    # ========================================================================
    LOG_LEVEL: str = config("LOG_LEVEL", default="INFO")
    LOG_FORMAT: str = config("LOG_FORMAT", default="console")  # json or console

    # ========================================================================
    # PARALLELISM
    # ========================================================================
    # Caps numba threads and thread-pool workers
    MAX_THREADS: int = config("OSEEN_MAX_THREADS", default=os.cpu_count() or 1, cast=int)

    # ========================================================================
    # OUTPUT
    # ========================================================================
    OUTPUT_DIR: str = config("OSEEN_OUTPUT_DIR", default="out")

    # ========================================================================
    # NUMERICS
    # ========================================================================
    # Largest pressure dimension handled by the dense inf-sup eigensolve
    DENSE_EIG_LIMIT: int = config("OSEEN_DENSE_EIG_LIMIT", default=4000, cast=int)
    # Target points per compiled kernel batch
    KERNEL_BATCH_SIZE: int = config("OSEEN_KERNEL_BATCH_SIZE", default=64, cast=int)
    # Elements per assembly chunk
    ASSEMBLY_CHUNK: int = config("OSEEN_ASSEMBLY_CHUNK", default=4096, cast=int)

    # ========================================================================
    # VALIDATION
    # ========================================================================
    def validate(self):
        """
        Validate configuration at startup.
        Fails fast on values the numerics cannot work with.
        """
        if self.LOG_FORMAT not in ("json", "console"):
            raise ValueError(f"LOG_FORMAT must be 'json' or 'console', got {self.LOG_FORMAT!r}")

        if self.MAX_THREADS < 1:
            raise ValueError("OSEEN_MAX_THREADS must be at least 1")

        for name in ("DENSE_EIG_LIMIT", "KERNEL_BATCH_SIZE", "ASSEMBLY_CHUNK"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

        return True


# ============================================================================
# SINGLETON INSTANCE
# ============================================================================

settings = Settings()

# Validate on import
settings.validate()
