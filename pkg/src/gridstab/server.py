import logging
import os

from mcp.server.fastmcp import FastMCP

from .dataset_manager import DatasetManager

logger = logging.getLogger(__name__)

# FastMCP初期化
mcp = FastMCP("gridstab")

# 環境変数から公開するデータセットを取得
datasets_env = os.getenv("GRIDSTAB_DATASETS", "").strip()
allowed_datasets = None
if datasets_env:
    allowed_datasets = [name.strip() for name in datasets_env.split(",") if name.strip()]

dataset_manager = DatasetManager(allowed_datasets=allowed_datasets)


@mcp.tool()
async def list_datasets() -> str:
    """構築済みデータセットの一覧を取得"""
    return dataset_manager.list_datasets()


@mcp.tool()
async def dataset_summary(name: str) -> str:
    """データセットの概要（分割・SNBS分布・TM比率・MFD範囲）

    Args:
        name: データセット名
    """
    return dataset_manager.dataset_summary(name)


@mcp.tool()
async def node_stability(name: str, grid_id: int) -> str:
    """グリッドのノードごとの安定性ターゲットを表で取得

    Args:
        name: データセット名
        grid_id: グリッド番号
    """
    return dataset_manager.node_stability(name, grid_id)


@mcp.tool()
async def find_troublemakers(name: str, limit: int = 20) -> str:
    """トラブルメーカーのノードを CP 下限の低い順に取得

    Args:
        name: データセット名
        limit: 返す結果の最大数（デフォルト: 20）
    """
    return dataset_manager.find_troublemakers(name, limit)


def main():
    """Entry point for the MCP server"""
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    # stdout は MCP プロトコル用なのでログは stderr（basicConfig の既定）
    dataset_manager.load_datasets()
    logger.info("Loaded %d datasets", dataset_manager.get_dataset_count())

    mcp.run(transport="stdio")


if __name__ == "__main__":
    main()
