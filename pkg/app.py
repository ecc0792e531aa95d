"""
bundlegraph - Recommendation API
Read-only JSON access to a trained bundle recommender and the run ledger
"""
import logging
import os

from flask import Flask
from flask_cors import CORS

from config import Config, load_run_config
from database.db import close_db, init_db
from routes.recommend import recommend_bp
from routes.runs import runs_bp
from services.recommender import Recommender

logger = logging.getLogger(__name__)


def create_app(recommender=None, ledger_path=None):
    """
    Application factory

    Args:
        recommender: Recommender to serve; model endpoints answer 503 without one
        ledger_path: run ledger database, Config.LEDGER_PATH by default
    """
    app = Flask(__name__)

    # Load configuration
    app.config.from_object(Config)
    if ledger_path:
        app.config['LEDGER_PATH'] = ledger_path
    Config.init_app(app)

    # Enable CORS
    CORS(app)

    init_db(app.config['LEDGER_PATH'])
    app.teardown_appcontext(close_db)

    app.register_blueprint(recommend_bp)
    app.register_blueprint(runs_bp)

    app.extensions['recommender'] = recommender
    return app


if __name__ == '__main__':
    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
    run_config = load_run_config(os.environ.get('BUNDLEGRAPH_CONFIG'))
    checkpoint = os.environ.get('BUNDLEGRAPH_CHECKPOINT')
    recommender = None
    if checkpoint and run_config.data_path:
        recommender = Recommender.from_files(run_config.data_path, checkpoint, run_config.train)
    else:
        logger.warning('No checkpoint configured; serving the run ledger only')

    app = create_app(recommender)
    logger.info(f"Server starting at http://{Config.HOST}:{Config.PORT}")
    app.run(debug=Config.DEBUG, host=Config.HOST, port=Config.PORT)
