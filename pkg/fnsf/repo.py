"""Repository layer for benchmark persistence."""

from typing import List, Optional

from sqlmodel import Session, SQLModel, create_engine, select

from fnsf.config import config
from fnsf.records import BenchResult


def get_engine(url: Optional[str] = None):
    """Engine for `url` (default: DATABASE_URL) with the tables created."""
    engine = create_engine(url or config.DATABASE_URL)
    SQLModel.metadata.create_all(engine)
    return engine


def upsert_result(session: Session, result_data: dict) -> BenchResult:
    """Insert or update one benchmark row keyed by "<scene_id>:<method>".

    Args:
        session: Database session
        result_data: Row dictionary (CSV columns plus optional `points`/`error`)

    Returns:
        The created or updated BenchResult
    """
    result_id = result_data.get("id") or f"{result_data['scene_id']}:{result_data['method']}"
    result = session.get(BenchResult, result_id)

    if result:
        for key, value in result_data.items():
            if hasattr(result, key) and key != "id":
                setattr(result, key, value)
    else:
        fields = {k: v for k, v in result_data.items() if k in BenchResult.model_fields}
        fields["id"] = result_id
        result = BenchResult(**fields)
        session.add(result)

    session.commit()
    session.refresh(result)
    return result


def get_all_results(session: Session) -> List[BenchResult]:
    """Get all benchmark rows, newest first."""
    statement = select(BenchResult).order_by(BenchResult.created_at.desc())
    return list(session.exec(statement).all())


def get_results_by_method(session: Session, method: str) -> List[BenchResult]:
    """Get rows for one method (e.g. 'dt-mlp')."""
    statement = select(BenchResult).where(BenchResult.method == method).order_by(BenchResult.created_at.desc())
    return list(session.exec(statement).all())
