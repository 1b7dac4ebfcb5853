from logging import getLogger
from pathlib import Path
from typing import Annotated, Optional

import typer

from .mock_shop import VariantConfig, load_catalog, make_server
from .util import BOLD, NC, G

logger = getLogger(__name__)


def serve_shop(
    variant: Annotated[
        str,
        typer.Option("--variant", help="Filter panel to serve: 'full' or 'reduced'"),
    ] = "full",
    threshold: Annotated[
        float,
        typer.Option("--threshold", help="Similarity threshold for the reduced filter panel", min=0, max=1),
    ] = 0.8,
    catalog: Annotated[
        Optional[Path],
        typer.Option("--catalog", help="Product catalog JSON. [default: the bundled catalog]", show_default=False),
    ] = None,
    host: Annotated[str, typer.Option("--host", help="Address to listen on")] = "127.0.0.1",
    port: Annotated[int, typer.Option("-p", "--port", help="Port to listen on (0 picks a free one)")] = 8000,
):
    """
    Serve the mock storefront over HTTP, for driving with a real browser through WebDriver.
    """
    if variant not in ("full", "reduced"):
        logger.error(f"Error: Unknown variant {BOLD}{variant}{NC}, expected 'full' or 'reduced'")
        raise typer.Exit(1)
    try:
        products = load_catalog(catalog)
    except (OSError, ValueError) as e:
        logger.error(f"Error: Could not load catalog: {e}")
        raise typer.Exit(1)
    server = make_server(
        products, VariantConfig(filter_mode=variant, threshold=threshold), host, port
    )
    address, bound = server.server_address[:2]
    logger.info(f"Serving {G}{variant}{NC} shop at {BOLD}http://{address}:{bound}/{NC} (Ctrl-C to stop)")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
