import logging

from colorama import Fore, Style

COLORS = {
    'WARNING': Fore.YELLOW,
    'INFO': Fore.WHITE,
    'DEBUG': Fore.BLUE,
    'CRITICAL': Fore.MAGENTA,
    'ERROR': Fore.RED
}

_console_level = logging.INFO
_log_file = None


class ColoredFormatter(logging.Formatter):
    def __init__(self, msg, use_color=True):
        logging.Formatter.__init__(self, msg)
        self.use_color = use_color

    def format(self, record):
        s = logging.Formatter.format(self, record)
        if self.use_color and record.levelname in COLORS:
            s = COLORS[record.levelname] + s + Style.RESET_ALL
        return s


# Custom logger class with console and optional file destinations
class ColoredLogger(logging.Logger):
    FORMAT = "%(message)s"
    FILE_FORMAT = "%(asctime)s [%(levelname)s] %(message)s (%(filename)s)"

    def __init__(self, name):
        logging.Logger.__init__(self, name, logging.DEBUG)

        if _log_file:
            fileHandler = logging.FileHandler(_log_file)
            fileHandler.setFormatter(logging.Formatter(self.FILE_FORMAT))
            self.addHandler(fileHandler)

        consoleHandler = logging.StreamHandler()
        consoleHandler.setLevel(_console_level)
        consoleHandler.setFormatter(ColoredFormatter(self.FORMAT))
        self.addHandler(consoleHandler)


def _colored_loggers():
    for item in logging.Logger.manager.loggerDict.values():
        if isinstance(item, ColoredLogger):
            yield item


def set_console_level(level):
    """Applies to loggers already created and to the ones created later."""
    global _console_level
    _console_level = level
    for log in _colored_loggers():
        for handler in log.handlers:
            if not isinstance(handler, logging.FileHandler):
                handler.setLevel(level)


def set_log_file(file_path):
    global _log_file
    if not file_path or file_path == _log_file:
        return
    _log_file = file_path
    formatter = logging.Formatter(ColoredLogger.FILE_FORMAT)
    for log in _colored_loggers():
        fileHandler = logging.FileHandler(file_path)
        fileHandler.setFormatter(formatter)
        log.addHandler(fileHandler)


def initialize(log_file=None):
    set_log_file(log_file)
    logging.setLoggerClass(ColoredLogger)
