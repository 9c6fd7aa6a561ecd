# db.py

from dotenv import load_dotenv
load_dotenv()

from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker
import os

DATABASE_URL = os.getenv("DATABASE_URL", "sqlite:///openfock.db")


def make_engine(url=None):
    return create_engine(url or DATABASE_URL, echo=False)


engine = make_engine()
SessionLocal = sessionmaker(bind=engine)
