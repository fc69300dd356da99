from ._apod import *  # noqa: F401,F403
