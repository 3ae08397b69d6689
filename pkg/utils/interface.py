import logging
import colorlog
import sys
import os
from datetime import datetime
import argparse
from enum import Enum
from alive_progress import alive_bar
from alive_progress.animations.spinners import frame_spinner_factory
from pathvalidate import sanitize_filename
from utils.misc import CONTROL_CODES_SUPPORTED


def _stderr_encodes(symbols):
    try:
        symbols.encode(sys.stderr.encoding or "ascii")
        return True
    except (UnicodeEncodeError, LookupError):
        return False


BRAILLE_FRAMES = "⣷⣯⣟⡿⢿⣻⣽⣾"

# Terminals without UTF-8 on stderr get the plain ASCII bar
if _stderr_encodes(BRAILLE_FRAMES):
    AP_SPINNER, AP_BAR = frame_spinner_factory(BRAILLE_FRAMES), "smooth"
else:
    AP_SPINNER, AP_BAR = "classic", "classic"


def progress_bar(total, title):
    """
        Progress bar for {total} training steps, drawn on stderr.

        Disabled when stderr is piped or the terminal only understands color codes.
    """

    show = sys.stderr.isatty() and CONTROL_CODES_SUPPORTED is not False

    return alive_bar(total, title=title, file=sys.stderr, spinner=AP_SPINNER, bar=AP_BAR, disable=not show,
                     enrich_print=False)


#
#   Arguments
#

class IllegalArgumentError(Exception):
    """ Raised by ArgumentParser in place of printing usage and exiting """

    def __init__(self, message):
        super().__init__(message)
        self.message = message

    def __str__(self):
        return self.message


class ArgumentParser(argparse.ArgumentParser):
    """ argparse parser whose errors reach the caller as IllegalArgumentError, so main() can pick the exit code """

    def error(self, message):
        raise IllegalArgumentError(f"{self.prog}: {message}")


def _enum_values(enum_type):
    if enum_type is None:
        raise ValueError("an Enum type is required")

    if not (isinstance(enum_type, type) and issubclass(enum_type, Enum)):
        raise TypeError(f"{enum_type!r} is not an Enum type")

    return [member.value for member in enum_type]


class EnumStoreAction(argparse.Action):
    """ Stores the member of the Enum given as {type} whose value was passed on the command line """

    def __init__(self, option_strings, dest, type=None, **kwargs):
        self._enum = type
        kwargs["choices"] = _enum_values(type)

        super().__init__(option_strings, dest, **kwargs)

    def __call__(self, parser, namespace, value, option_string=None):
        setattr(namespace, self.dest, self._enum(value))


class SubParserEnumStoreAction(argparse._SubParsersAction):
    """ Subcommand action whose command names are the values of an Enum, the chosen command is stored as member """

    def __init__(self, option_strings, type=None, **kwargs):
        self._enum = type
        self._names = _enum_values(type)

        super().__init__(option_strings, **kwargs)

    def add_parser(self, name, **kwargs):
        name = name.value if isinstance(name, Enum) else name

        if name not in self._names:
            raise ValueError(f"{name!r} is not a {self._enum.__name__} value")

        return super().add_parser(name, **kwargs)

    def __call__(self, parser, namespace, values, option_string=None):
        super().__call__(parser, namespace, values, option_string)

        if self.dest is argparse.SUPPRESS:
            return

        chosen = getattr(namespace, self.dest, None)

        try:
            setattr(namespace, self.dest, self._enum(chosen))
        except ValueError:
            raise argparse.ArgumentError(self, f"unknown command {chosen!r} (choices: {', '.join(self._names)})")


#
#   Logging
#

CONSOLE_FORMAT = "[%(asctime)s] %(log_color)s[%(name)s/%(levelname)s]%(reset)s %(message_log_color)s%(message)s"
FILE_FORMAT = "[%(asctime)s] [%(name)s/%(levelname)s] %(message)s"
CONSOLE_DATEFORMAT = "%H:%M:%S"
FILE_DATEFORMAT = "%Y-%m-%d %H:%M:%S"

LEVEL_COLORS = {
    "DEBUG":    "white",
    "INFO":     "green",
    "WARNING":  "yellow",
    "ERROR":    "red",
    "CRITICAL": "black,bg_red"
}
MESSAGE_COLORS = {
    "message": {
        "DEBUG":    "white",
        "INFO":     "light_white",
        "WARNING":  "yellow",
        "ERROR":    "red",
        "CRITICAL": "red"
    }
}

# Upper bound on the "_<n>" suffixes tried for one day's logfile
MAX_LOGFILE_SUFFIX = 10000


class LabLogging:
    """
        Process-wide logging setup. Only has class methods, can't be instantiated!

        Console output goes to stderr, stdout stays reserved for command results. Call prepare() first, then
        setup_console() and optionally setup_logfile().
    """

    log_debug = False
    handlers = {"console": None, "logfile": None}
    logfile_path = None

    console_formatter = colorlog.ColoredFormatter(CONSOLE_FORMAT, datefmt=CONSOLE_DATEFORMAT, log_colors=LEVEL_COLORS,
                                                  secondary_log_colors=MESSAGE_COLORS)
    file_formatter = logging.Formatter(FILE_FORMAT, datefmt=FILE_DATEFORMAT)

    def __new__(cls, *args, **kwargs):
        raise TypeError(f"{cls.__name__} cannot be instantiated")

    @classmethod
    def level(cls):
        return logging.DEBUG if cls.log_debug else logging.INFO

    @classmethod
    def prepare(cls):
        """ Detaches handlers left over from an earlier run in the same process and lets the root logger pass everything """

        root = logging.getLogger()

        for handler in list(root.handlers):
            root.removeHandler(handler)

            if handler is cls.handlers["logfile"]:
                handler.close()

        cls.handlers = {"console": None, "logfile": None}
        cls.logfile_path = None

        root.setLevel(logging.DEBUG)

    @classmethod
    def set_log_debug(cls, log_debug=True):
        """ Switches every attached handler between DEBUG and INFO """

        cls.log_debug = log_debug

        for handler in cls.handlers.values():
            if handler is not None:
                handler.setLevel(cls.level())

    @classmethod
    def _attach(cls, name, handler, formatter):
        handler.setFormatter(formatter)
        handler.setLevel(cls.level())

        logging.getLogger().addHandler(handler)
        cls.handlers[name] = handler

    @staticmethod
    def get_logfile_path(log_dir, base_filename=None, ending="log"):
        """
            Free logfile path in {log_dir} named "<base_filename>_<date>.<ending>". Taken names get "_1", "_2", ...
            appended.
        """

        if not os.path.isdir(log_dir):
            raise ValueError(f"Log directory '{log_dir}' does not exist")

        stem = datetime.today().strftime("%Y-%m-%d")

        if base_filename is not None:
            stem = f"{sanitize_filename(base_filename, replacement_text='_')}_{stem}"

        candidate = os.path.join(log_dir, f"{stem}.{ending}")

        for suffix in range(1, MAX_LOGFILE_SUFFIX):
            if not os.path.exists(candidate):
                return candidate

            candidate = os.path.join(log_dir, f"{stem}_{suffix}.{ending}")

        raise FileExistsError(f"No free logfile name left for '{stem}' in '{log_dir}'")

    @classmethod
    def setup_console(cls):
        """ Colored log output on stderr """

        cls._attach("console", logging.StreamHandler(sys.stderr), cls.console_formatter)

    @classmethod
    def setup_logfile(cls, log_dir):
        """
            Plain log output into a new file under {log_dir}, which is created when missing

            Arguments:
                - log_dir: Directory to store logs at
        """

        os.makedirs(log_dir, exist_ok=True)

        cls.logfile_path = cls.get_logfile_path(log_dir, "dalip")
        cls._attach("logfile", logging.FileHandler(cls.logfile_path), cls.file_formatter)
