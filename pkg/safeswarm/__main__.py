# Copyright Lightning AI. Licensed under the Apache License 2.0, see LICENSE file.

from typing import TYPE_CHECKING, Any

from safeswarm.scripts.escape_time import escape_time as escape_time_fn
from safeswarm.scripts.sweep import sweep as sweep_fn
from safeswarm.simulate import setup as run_fn

if TYPE_CHECKING:
    from jsonargparse import ArgumentParser


def _new_parser(**kwargs: Any) -> "ArgumentParser":
    from jsonargparse import ActionConfigFile, ArgumentParser

    parser = ArgumentParser(**kwargs)
    parser.add_argument(
        "-c", "--config", action=ActionConfigFile, help="Path to a configuration file in json or yaml format."
    )
    return parser


def main() -> None:
    parser_data = {
        "run": {"help": "Simulate a mission and write its trace.", "fn": run_fn},
        "escape_time": {"help": "Print the escape time of a scenario.", "fn": escape_time_fn},
        "sweep": {"help": "Repeat a scenario over several effective ranges of the spoofing device.", "fn": sweep_fn},
    }

    from jsonargparse import set_config_read_mode, set_docstring_parse_options

    set_docstring_parse_options(attribute_docstrings=True)
    set_config_read_mode(urls_enabled=True)

    root_parser = _new_parser(prog="safeswarm")

    subcommands = root_parser.add_subcommands()
    for k, v in parser_data.items():
        subcommand_parser = _new_parser()
        subcommand_parser.add_function_arguments(v["fn"])
        subcommands.add_subcommand(k, subcommand_parser, help=v["help"])

    args = root_parser.parse_args()
    args = root_parser.instantiate_classes(args)

    subcommand = args.get("subcommand")
    kwargs = args.get(subcommand)
    kwargs.pop("config")

    parser_data[subcommand]["fn"](**kwargs)


if __name__ == "__main__":
    main()
