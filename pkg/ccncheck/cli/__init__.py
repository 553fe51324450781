"""
Configure the CLI
"""
import argparse
from typing import Optional

import cli_builder


dispatch = cli_builder.Dispatch()

def command(name: str, *, arguments: Optional[dict]=None):
    """
    Register `name` as a top-level command of `dispatch`, next to the command groups.
    """
    def register_command(func):
        parser = dispatch.parser_groups.add_parser(name,
                                                   help=(func.__doc__ or "").strip().split("\n")[0],
                                                   description=func.__doc__,
                                                   formatter_class=argparse.RawDescriptionHelpFormatter)
        for argname, kwargs in (arguments or dict()).items():
            parser.add_argument(argname, **(kwargs or dict()))
        parser.set_defaults(func=func)
        if not hasattr(func, "arg_processor"):
            func.arg_processor = None
        return func
    return register_command
