fn main() {
    std::process::exit(mosgplda::cli::main_entry());
}
