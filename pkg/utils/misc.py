import logging
import os

from packaging import version

from dalip.errors import ConfigurationError

LOGGER = logging.getLogger("Misc")

LAB_VERSION = "1.0.0"

CONTROL_CODES_SUPPORTED = None

# If TERM environment variable contains "coloronly", disable stuff that uses ANSI escape codes other than color
if ("TERM" in os.environ) and ("coloronly" in os.environ["TERM"]):
    CONTROL_CODES_SUPPORTED = False


def ExcludeIfNone(value):
    """Do not include field for None values"""
    return value is None


def check_manifest_version(found, source):
    """
        Checks that a manifest written with version {found} can be read by this build.

        A different major version raises ConfigurationError naming {source}, a newer minor or patch version is only
        logged as a warning.
    """

    try:
        found_version = version.parse(str(found))
    except version.InvalidVersion:
        raise ConfigurationError(f"{source}: unreadable manifest version '{found}'")

    own_version = version.parse(LAB_VERSION)

    if found_version.major != own_version.major:
        raise ConfigurationError(f"{source}: manifest version {found} is incompatible with {LAB_VERSION}")

    if found_version > own_version:
        LOGGER.warning(f"{source} was written by a newer version ({found}) than this one ({LAB_VERSION})")
