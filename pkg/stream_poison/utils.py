import logging

import numpy as np

LOGGER_NAME = 'stream_poison'
FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# one stream per component, so changing e.g. the attack does not reshuffle the data
COMPONENTS = ('dataset', 'init', 'shuffle', 'attack', 'ood')


def create_logger(output_file, add_stream=True):
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(logging.INFO)
    formatter = logging.Formatter(FORMAT)

    # Add file handler
    file_handler = logging.FileHandler(output_file)
    file_handler.setFormatter(formatter)
    logger.addHandler(file_handler)

    # Add stream handler
    if add_stream:
        stream_handler = logging.StreamHandler()
        stream_handler.setFormatter(formatter)
        logger.addHandler(stream_handler)

    return logger


def close_logger(logger):
    for handler in list(logger.handlers):
        handler.close()
        logger.removeHandler(handler)


def component_seeds(master_seed):
    """Split one master seed into independent per-component integer seeds."""
    children = np.random.SeedSequence(int(master_seed)).spawn(len(COMPONENTS))
    return {name: int(child.generate_state(1)[0]) for name, child in zip(COMPONENTS, children)}


def parse_range(text):
    """Parse 'a..b' (inclusive) or a comma list into a list of ints."""
    if isinstance(text, int):
        return [text]
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    text = str(text).strip()
    if not text:
        return []
    if '..' in text:
        lo, hi = text.split('..', 1)
        lo, hi = int(lo), int(hi)
        return list(range(lo, hi + 1))
    return [int(v) for v in text.split(',') if v.strip()]
